"""Losses, optimizer, lr schedule, synthetic data, and the training loop.

The loop is deterministic end to end: parameters come from the config seed,
every batch's sample indices are a pure function of (seed, step), and the
optimizer is plain Adam.  Loading a checkpoint and continuing from its step
therefore reproduces the next loss value bit-exactly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .io import load_sdt1, save_sdt1
from .network import Model, forward, save_model
from .rng import Stream, derive_seed
from .tensor import (
    NumericsError,
    Tensor,
    _as_tensor,
    _make,
    narrow,
    reshape,
    softmax,
    tsum,
)

_BATCH_KEY = 0xB47C  # sub-stream tag for per-step batch sampling


class TrainingAborted(RuntimeError):
    """Loss went non-finite; message carries the failing step."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 2e-4
    decay_start_step: int = 50_000
    decay_every: int = 10_000
    decay_factor: float = 0.5
    max_steps: int = 2_000
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.decay_start_step, self.decay_every,
               self.max_steps) < 1:
            raise ValueError("config counts must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.lambda_dice < 0 or self.lambda_ce < 0:
            raise ValueError("loss weights must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SegSample:
    image: Tensor   # (C_in, H, W) float in [0, 1]
    label: Tensor   # (H, W) uint8 class ids
    classes: int

    def __post_init__(self):
        if self.image.shape[-2:] != self.label.shape:
            raise ValueError("image and label sizes differ")
        if self.label.data.max(initial=0) >= self.classes:
            raise ValueError("label id outside [0, classes)")


# -- losses -------------------------------------------------------------------

def _as_batched_pair(logits, label):
    lg = _as_tensor(logits)
    lab = np.asarray(label.data if isinstance(label, Tensor) else label)
    if lg.ndim == 3:
        lg = reshape(lg, (1,) + lg.shape)
        lab = lab[None]
    if lg.ndim != 4 or lab.shape != (lg.shape[0],) + lg.shape[2:]:
        raise ValueError(f"logits {lg.shape} do not match labels {lab.shape}")
    k = lg.shape[1]
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= k:
        raise ValueError(f"label ids outside [0, {k})")
    return lg, lab.astype(np.int64)


def dice_loss(logits, label, eps: float = 1e-5) -> Tensor:
    """Soft dice on softmax probabilities, averaged over foreground classes."""
    lg, lab = _as_batched_pair(logits, label)
    k = lg.shape[1]
    if k < 2:
        raise ValueError("dice needs at least 2 classes")
    p = softmax(lg, axis=1)
    total = None
    for c in range(1, k):
        gc = (lab == c).astype(lg.dtype.type)[:, None]
        pc = narrow(p, 1, c, 1)
        inter = tsum(pc * Tensor(gc, dtype=lg.dtype))
        denom = tsum(pc) + float(gc.sum())
        term = 1.0 - (2.0 * inter + eps) / (denom + eps)
        total = term if total is None else total + term
    # keep the averaging constant in the logits dtype; a bare python float
    # would round through the default (f32) and perturb f64 runs
    return total * Tensor(np.asarray(1.0 / (k - 1)), dtype=lg.dtype)


def ce_loss(logits, label) -> Tensor:
    """Mean -log softmax at the true class; one fused, stabilized node."""
    lg, lab = _as_batched_pair(logits, label)
    x = lg.data
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    picked = np.take_along_axis(x, lab[:, None], axis=1)
    n = picked.size
    out = np.asarray((lse - picked).sum() / n, dtype=x.dtype)

    def bwd(g):
        soft = np.exp(x - lse)
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)
        return (g * (soft - onehot) / n,)

    return _make("ce_loss", out, (lg,), bwd)


def combined_loss(logits, label, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    dl = dice_loss(logits, label)
    cl = ce_loss(logits, label)
    return cfg.lambda_dice * dl + cfg.lambda_ce * cl, dl, cl


# -- schedule and optimizer ----------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Constant until decay_start_step, then halved there and every
    decay_every steps after (first decay lands ON the start step)."""
    if step < cfg.decay_start_step:
        return cfg.base_lr
    k = 1 + (step - cfg.decay_start_step) // cfg.decay_every
    return cfg.base_lr * cfg.decay_factor ** k


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- synthetic data -------------------------------------------------------------

_INTENSITY = {0: 0.15, 1: 0.85, 2: 0.45, 3: 0.65}
_NOISE_SIGMA = 0.1


def _ellipse_mask(h: int, w: int, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_sample(h: int, w: int, k: int, stream: Stream) -> SegSample:
    """One image: 1-3 shapes on a noisy background.

    Class ids: 0 background, 1 ellipse interior, 2 surrounding ring when
    k >= 3, 3 a small extra blob when k == 4.  Later shapes overwrite
    earlier labels; the image is a per-class intensity plus Gaussian noise,
    clipped to [0, 1].
    """
    label = np.zeros((h, w), dtype=np.uint8)
    n_shapes = 1 + int(stream.uniform(1)[0] * 3.0)
    lim = min(h, w)
    for s in range(n_shapes):
        cy, cx = stream.uniform(2, 0.3, 0.7) * (h, w)
        ry, rx = stream.uniform(2, lim / 6.0, lim / 4.0)
        if s == 0 and k >= 3:
            inner = stream.uniform(1, 0.4, 0.7)[0]
            label[_ellipse_mask(h, w, cy, cx, ry, rx)] = 2
            label[_ellipse_mask(h, w, cy, cx, inner * ry, inner * rx)] = 1
        else:
            label[_ellipse_mask(h, w, cy, cx, ry, rx)] = 1
    if k == 4:
        cy, cx = stream.uniform(2, 0.2, 0.8) * (h, w)
        ry, rx = stream.uniform(2, lim / 12.0, lim / 8.0)
        label[_ellipse_mask(h, w, cy, cx, ry, rx)] = 3
    lut = np.array([_INTENSITY[c] for c in range(4)])
    img = lut[label] + stream.normal((h, w), 0.0, _NOISE_SIGMA)
    img = np.clip(img, 0.0, 1.0)[None]
    return SegSample(Tensor(img), Tensor(label.astype(np.uint8)), k)


def synth_dataset(n: int, h: int, w: int, k: int, seed: int) -> list[SegSample]:
    if k not in (2, 3, 4):
        raise ValueError(f"classes must be 2, 3 or 4, got {k}")
    return [synth_sample(h, w, k, Stream(derive_seed(seed, i))) for i in range(n)]


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Sample indices for one step; pure in (seed, step) so training can
    resume from a checkpoint without replaying earlier draws."""
    return Stream(derive_seed(seed, _BATCH_KEY, step)).integers(batch_size, n)


# -- the loop -------------------------------------------------------------------

LOG_EVERY = 50
CKPT_NAME = "checkpoint.sdck"
CURVE_NAME = "loss.csv"


def train(model: Model, data: list, cfg: TrainConfig, out_dir=None,
          start_step: int = 0, log=None, ckpt_path=None,
          curve_path=None) -> list[dict]:
    """Run the optimization; returns the logged rows and writes the loss
    curve CSV and final checkpoint (defaults: out_dir/loss.csv and
    out_dir/checkpoint.sdck)."""
    if not data:
        raise ValueError("empty dataset")
    if out_dir is None and (ckpt_path is None or curve_path is None):
        raise ValueError("need out_dir or explicit ckpt_path and curve_path")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = ckpt_path or out / CKPT_NAME
        curve_path = curve_path or out / CURVE_NAME
    params = model.named_parameters()
    state = AdamState()
    rows: list[dict] = []
    t0 = time.monotonic()

    for step in range(start_step, cfg.max_steps):
        idx = batch_indices(cfg.seed, step, cfg.batch_size, len(data))
        images = np.stack([data[i].image.data for i in idx])
        labels = np.stack([data[i].label.data for i in idx])
        try:
            logits, _ = forward(model, Tensor(images))
            loss, dl, cl = combined_loss(logits, labels, cfg)
            for p in params.values():
                p.zero_grad()
            loss.backward()
        except NumericsError as e:
            raise TrainingAborted(f"non-finite value at step {step}: {e}") from e
        lr = lr_at(step, cfg)
        if step % LOG_EVERY == 0 or step == cfg.max_steps - 1:
            row = {
                "step": step,
                "loss": loss.item(),
                "dice_loss": dl.item(),
                "ce_loss": cl.item(),
                "lr": lr,
            }
            rows.append(row)
            if log is not None:
                log(row)
        grads = {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in params.items()
        }
        adam_step(params, grads, state, lr)

    Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
    Path(curve_path).parent.mkdir(parents=True, exist_ok=True)
    _write_curve(curve_path, rows)
    save_model(ckpt_path, model, extra={
        "step": np.float64(cfg.max_steps),
        "train_seconds": np.float64(time.monotonic() - t0),
    })
    return rows


def _write_curve(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "loss", "dice_loss", "ce_loss", "lr"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


# -- dataset directory round trip ------------------------------------------------

def save_dataset(dirpath, samples: list) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(samples):
        img, lab = f"img_{i:05d}.sdt", f"lab_{i:05d}.sdt"
        save_sdt1(d / img, s.image.data.astype(np.float32))
        save_sdt1(d / lab, s.label.data.astype(np.uint8))
        manifest.append({"image": img, "label": lab, "classes": s.classes})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(dirpath) -> list[SegSample]:
    d = Path(dirpath)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest.json under {d}")
    samples = []
    for entry in json.loads(mf.read_text()):
        img = load_sdt1(d / entry["image"])
        lab = load_sdt1(d / entry["label"])
        samples.append(SegSample(Tensor(img), Tensor(lab), int(entry["classes"])))
    return samples
