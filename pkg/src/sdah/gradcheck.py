"""Finite-difference validation of analytic gradients.

Runs in float64: the op under test is applied to f64 copies of the inputs,
its output is collapsed to a scalar by a fixed random projection (so ops
with tensor outputs are covered by one backward), and each input element is
wiggled by +-h for a central difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream
from .tensor import Tensor, default_dtype, no_grad, tsum


@dataclass
class GradReport:
    op: str
    max_rel_err: float
    max_abs_err: float
    per_input: list

    def __str__(self):
        return f"grad_check[{self.op}]: max rel err {self.max_rel_err:.3e}"


class GradCheckError(AssertionError):
    pass


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def grad_check(op, inputs, h: float = 1e-5, tol: float | None = None,
               seed: int = 0, name: str | None = None) -> GradReport:
    """Compare op's backward against central differences at `inputs`.

    `op` maps Tensor positional args to a Tensor; `inputs` are arrays or
    Tensors and every one of them is checked.  Raises GradCheckError when
    `tol` is given and exceeded.
    """
    with default_dtype(np.float64):
        ts = [
            Tensor(np.asarray(x.data if isinstance(x, Tensor) else x,
                              dtype=np.float64).copy(), requires_grad=True)
            for x in inputs
        ]

        def scalar(args):
            out = op(*args)
            if out.size == 1:
                return out
            # fixed projection, independent of the wiggled inputs
            proj = Stream(Stream(seed).seed ^ 0x5DEECE66D).uniform(out.shape, -1.0, 1.0)
            return tsum(out * Tensor(proj))

        loss = scalar(ts)
        loss.backward()

        per_input = []
        worst_rel = 0.0
        worst_abs = 0.0
        for t in ts:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            with no_grad():
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = scalar(ts).item()
                    flat[i] = orig - h
                    fm = scalar(ts).item()
                    flat[i] = orig
                    nflat[i] = (fp - fm) / (2.0 * h)
            rel = _rel_err(analytic, numeric)
            per_input.append(rel)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, float(np.abs(analytic - numeric).max(initial=0.0)))

        report = GradReport(
            op=name or getattr(op, "__name__", "op"),
            max_rel_err=worst_rel,
            max_abs_err=worst_abs,
            per_input=per_input,
        )
        if tol is not None and worst_rel >= tol:
            raise GradCheckError(f"{report} exceeds tol {tol:.1e}")
        return report
