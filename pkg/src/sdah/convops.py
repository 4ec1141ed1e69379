"""2-D convolution and transposed convolution primitives.

Cross-correlation semantics with zero padding.  Forward/backward are built
on an im2col view plus batched matmuls; the col2im scatter runs as k*k
ordered slice additions so the reduction order is fixed.

Geometry is strict by default: (H + 2p - k) must be divisible by the stride
or the op raises.  `allow_floor=True` opts into floor semantics (trailing
rows/cols that do not fill a full stride step are dropped), which the
embedding stem needs for its stride-2 3x3 layers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _as_tensor, _make


def _out_size(n: int, k: int, s: int, p: int, allow_floor: bool, op: str) -> int:
    span = n + 2 * p - k
    if span < 0:
        raise ValueError(f"{op}: kernel {k} exceeds padded input {n + 2 * p}")
    if not allow_floor and span % s != 0:
        raise ValueError(
            f"{op}: non-integral output size for input {n}, kernel {k}, "
            f"stride {s}, padding {p}"
        )
    return span // s + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> contiguous (N, C, k, k, ho, wo) patch array."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * s, s3 * s))
    return np.ascontiguousarray(view)


def _col2im(dcols: np.ndarray, hw: tuple[int, int], k: int, s: int, p: int) -> np.ndarray:
    """Adjoint of _im2col: scatter (N,C,k,k,ho,wo) back onto (N,C,H,W)."""
    n, c, _, _, ho, wo = dcols.shape
    h, w = hw
    buf = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            buf[:, :, ki : ki + ho * s : s, kj : kj + wo * s : s] += dcols[:, :, ki, kj]
    if p:
        buf = buf[:, :, p : p + h, p : p + w]
    return buf


def _conv_forward(x, w, s, p, g, allow_floor):
    n, cin, h, wd = x.shape
    cout, cg, k, _ = w.shape
    ho = _out_size(h, k, s, p, allow_floor, "conv2d")
    wo = _out_size(wd, k, s, p, allow_floor, "conv2d")
    cols = _im2col(_pad(x, p), k, s, ho, wo)  # (N,C,k,k,ho,wo)
    cols = cols.reshape(n, g, cg * k * k, ho * wo)
    wm = w.reshape(g, cout // g, cg * k * k)
    y = np.matmul(wm, cols)  # (N,g,cout/g,L)
    return y.reshape(n, cout, ho, wo), cols


def _conv_backward_x(dy, w, s, p, g, in_hw):
    n = dy.shape[0]
    cout, cg, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    wm = w.reshape(g, cout // g, cg * k * k)
    dyr = dy.reshape(n, g, cout // g, ho * wo)
    dcols = np.matmul(np.swapaxes(wm, -1, -2), dyr)  # (N,g,cg*k*k,L)
    dcols = dcols.reshape(n, g * cg, k, k, ho, wo)
    return _col2im(dcols, in_hw, k, s, p)


def _conv_backward_w(x, dy, k, s, p, g):
    n, cin, h, wd = x.shape
    cout = dy.shape[1]
    ho, wo = dy.shape[2], dy.shape[3]
    cg = cin // g
    cols = _im2col(_pad(x, p), k, s, ho, wo).reshape(n, g, cg * k * k, ho * wo)
    dyr = dy.reshape(n, g, cout // g, ho * wo)
    dw = np.matmul(dyr, np.swapaxes(cols, -1, -2)).sum(axis=0)  # (g,cout/g,cg*k*k)
    return dw.reshape(cout, cg, k, k)


def _with_batch(t: Tensor):
    """Accept (C,H,W) or (N,C,H,W); report whether a batch axis was added."""
    if t.ndim == 3:
        from .tensor import reshape

        return reshape(t, (1,) + t.shape), True
    if t.ndim == 4:
        return t, False
    raise ValueError(f"expected 3- or 4-D input, got shape {t.shape}")


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1,
           allow_floor: bool = False) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    x: (C_in,H,W) or (N,C_in,H,W); w: (C_out, C_in/groups, k, k);
    bias: (C_out,) or None.  groups=C_in gives a depthwise convolution.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    xb, squeezed = _with_batch(x)
    n, cin, h, wd = xb.shape
    cout, cg, k, k2 = w.shape
    if k != k2:
        raise ValueError("conv2d kernels must be square")
    if cin % groups != 0 or cout % groups != 0 or cg != cin // groups:
        raise ValueError(
            f"conv2d channel/group mismatch: C_in={cin}, C_out={cout}, "
            f"groups={groups}, weight={w.shape}"
        )
    y, _ = _conv_forward(xb.data, w.data, stride, padding, groups, allow_floor)

    parents = [xb, w]
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        if bias.shape != (cout,):
            raise ValueError("conv2d bias must be (C_out,)")
        y = y + bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)

    def bwd(g):
        dx = _conv_backward_x(g, w.data, stride, padding, groups, (h, wd))
        dw = _conv_backward_w(xb.data, g, k, stride, padding, groups)
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    out = _make("conv2d", y, tuple(parents), bwd)
    if squeezed:
        from .tensor import reshape

        out = reshape(out, out.shape[1:])
    return out


def deconv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with the same weight.

    x: (C_in,H,W) or (N,C_in,H,W); w: (C_in, C_out, k, k); output spatial
    size is (H-1)*stride - 2*padding + k.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    xb, squeezed = _with_batch(x)
    n, cin, h, wd = xb.shape
    cin_w, cout, k, k2 = w.shape
    if k != k2:
        raise ValueError("deconv2d kernels must be square")
    if cin_w != cin:
        raise ValueError(f"deconv2d channel mismatch: input {cin}, weight {w.shape}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise ValueError(f"deconv2d invalid geometry: output {ho}x{wo}")
    y = _conv_backward_x(xb.data, w.data, stride, padding, 1, (ho, wo))

    parents = [xb, w]
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        if bias.shape != (cout,):
            raise ValueError("deconv2d bias must be (C_out,)")
        y = y + bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)

    def bwd(g):
        dx, _ = _conv_forward(g, w.data, stride, padding, 1, False)
        dw = _conv_backward_w(g, xb.data, k, stride, padding, 1)
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    out = _make("deconv2d", y, tuple(parents), bwd)
    if squeezed:
        from .tensor import reshape

        out = reshape(out, out.shape[1:])
    return out
