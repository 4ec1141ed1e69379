"""Shifted-window multi-head self-attention with learned sampling offsets.

Each head projects its window patches to queries, predicts a bounded 2-D
offset per patch from those queries (depthwise 5x5 -> GELU -> grouped 1x1),
and gathers keys/values by bilinear sampling of the full (cyclically
shifted) feature map at reference + offset.  A continuous relative-position
bias is read from a learned (2*ws-1)^2 table by bilinear interpolation, so
at zero offset the mechanism reduces exactly to plain shifted-window
attention with the integer-indexed bias.

All public entry points accept (C, H, W) tensors; internally everything is
batched as (B, ...) with heads folded into the batch axis where convenient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .convops import conv2d
from .rng import Stream
from .sampling import bilinear_sample_batch
from .tensor import (
    Tensor,
    _as_tensor,
    broadcast_to,
    clip,
    concat,
    gelu,
    matmul,
    narrow,
    reshape,
    roll,
    softmax,
    swap_last,
    tanh,
    transpose,
)

OFFSET_KERNEL = 5  # depthwise kernel of the offset net


@dataclass(frozen=True)
class WindowLayout:
    """Partition of an (h, w) map into non-overlapping ws x ws windows."""

    h: int
    w: int
    ws: int
    shift: int = 0

    def __post_init__(self):
        if self.ws < 1:
            raise ValueError("window size must be positive")
        if self.h % self.ws or self.w % self.ws:
            raise ValueError(
                f"window {self.ws} does not divide map {self.h}x{self.w}"
            )
        if self.shift not in (0, self.ws // 2):
            raise ValueError(f"shift must be 0 or {self.ws // 2}, got {self.shift}")

    @property
    def n_windows(self) -> int:
        return (self.h // self.ws) * (self.w // self.ws)

    @property
    def patches(self) -> int:
        return self.ws * self.ws


def effective_window(ws: int, h: int, w: int) -> int:
    """Window size actually used at a stage: capped by the map itself."""
    return min(ws, h, w)


def _split(x: Tensor, layout: WindowLayout) -> Tensor:
    """(B,C,H,W) -> (B, n_windows, ws*ws, C), row-major in both orders."""
    b, c = x.shape[0], x.shape[1]
    ws = layout.ws
    ny, nx = layout.h // ws, layout.w // ws
    t = reshape(x, (b, c, ny, ws, nx, ws))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (b, ny * nx, ws * ws, c))


def _stitch(wins: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of _split."""
    b = wins.shape[0]
    ws = layout.ws
    ny, nx = layout.h // ws, layout.w // ws
    c = wins.shape[-1]
    t = reshape(wins, (b, ny, nx, ws, ws, c))
    t = transpose(t, (0, 5, 1, 3, 2, 4))
    return reshape(t, (b, c, layout.h, layout.w))


def _with_batch(x) -> tuple[Tensor, bool]:
    x = _as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def window_partition(x, layout: WindowLayout) -> Tensor:
    """Cyclic shift (when layout.shift > 0) then split into windows."""
    xb, squeeze = _with_batch(x)
    if xb.shape[2] != layout.h or xb.shape[3] != layout.w:
        raise ValueError(f"map {xb.shape[2:]} does not match layout {layout}")
    if layout.shift:
        xb = roll(xb, (-layout.shift, -layout.shift), (2, 3))
    wins = _split(xb, layout)
    return reshape(wins, wins.shape[1:]) if squeeze else wins


def window_merge(wins, layout: WindowLayout) -> Tensor:
    """Exact inverse of window_partition, including the un-shift."""
    wins = _as_tensor(wins)
    squeeze = wins.ndim == 3
    if squeeze:
        wins = reshape(wins, (1,) + wins.shape)
    if wins.shape[1] != layout.n_windows or wins.shape[2] != layout.patches:
        raise ValueError(f"windows {wins.shape} do not match layout {layout}")
    x = _stitch(wins, layout)
    if layout.shift:
        x = roll(x, (layout.shift, layout.shift), (2, 3))
    return reshape(x, x.shape[1:]) if squeeze else x


def window_origins(layout: WindowLayout) -> np.ndarray:
    """(n_windows, 2) top-left (y, x) of each window, row-major order."""
    ny, nx = layout.h // layout.ws, layout.w // layout.ws
    wy, wx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    return np.stack([wy.ravel(), wx.ravel()], axis=-1).astype(np.float64) * layout.ws


def _local_grid(ws: int) -> np.ndarray:
    iy, ix = np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")
    return np.stack([iy.ravel(), ix.ravel()], axis=-1).astype(np.float64)


def reference_points(layout: WindowLayout) -> np.ndarray:
    """(n_windows, ws*ws, 2) integer patch coordinates, (y, x), in the
    shifted map's global frame."""
    return window_origins(layout)[:, None, :] + _local_grid(layout.ws)[None, :, :]


@dataclass
class SdmsaParams:
    """Learned state of one attention layer.

    wq/wk/wv are per-head (n_heads, d, d) blocks; wo mixes the concatenated
    heads.  bias_table holds one (2*ws-1)^2 grid per head, indexed by
    relative displacement.  The offset net exists only when deformation is
    on: a depthwise 5x5 over all C channels plus a grouped 1x1 mapping each
    head's d channels to (dy, dx).
    """

    n_heads: int
    ws: int
    gamma_off: float
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bias_table: Tensor
    off_dw_w: Tensor | None = None
    off_dw_b: Tensor | None = None
    off_pw_w: Tensor | None = None
    off_pw_b: Tensor | None = None
    clamp_to_window: bool = False

    @property
    def channels(self) -> int:
        return self.wo.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    @property
    def deformable(self) -> bool:
        return self.off_dw_w is not None

    @classmethod
    def init(cls, channels: int, n_heads: int, ws: int, stream: Stream,
             deform: bool = True, gamma_off: float = 1.0,
             clamp_to_window: bool = False) -> "SdmsaParams":
        if channels % n_heads:
            raise ValueError(f"{n_heads} heads do not divide {channels} channels")
        d = channels // n_heads
        t = 2 * ws - 1

        def u(shape, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return Tensor(stream.uniform(shape, -b, b), requires_grad=True)

        def z(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        off_dw_w = off_dw_b = off_pw_w = off_pw_b = None
        if deform:
            k = OFFSET_KERNEL
            off_dw_w = u((channels, 1, k, k), k * k)
            off_dw_b = z((channels,))
            off_pw_w = u((2 * n_heads, d, 1, 1), d)
            off_pw_b = z((2 * n_heads,))
        return cls(
            n_heads=n_heads,
            ws=ws,
            gamma_off=gamma_off,
            wq=u((n_heads, d, d), d),
            wk=u((n_heads, d, d), d),
            wv=u((n_heads, d, d), d),
            wo=u((channels, channels), channels),
            bias_table=z((n_heads, t, t)),
            off_dw_w=off_dw_w,
            off_dw_b=off_dw_b,
            off_pw_w=off_pw_w,
            off_pw_b=off_pw_b,
            clamp_to_window=clamp_to_window,
        )

    def named_tensors(self) -> dict[str, Tensor]:
        out = {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "bias_table": self.bias_table,
        }
        if self.deformable:
            out.update(
                off_dw_w=self.off_dw_w, off_dw_b=self.off_dw_b,
                off_pw_w=self.off_pw_w, off_pw_b=self.off_pw_b,
            )
        return out


@dataclass
class SdmsaTrace:
    """Forward record for the explanation exports.

    Arrays are the very ones used in the forward pass (no copies):
    reference_points (n_windows, P, 2); offsets and deformed points
    (B, n_windows, n_heads, P, 2) where deformed = clip(ref + offset)
    exactly as sampled; attention (B, n_windows, n_heads, P, P).
    Coordinates live in the shifted map's frame; `layout.shift` tells the
    consumer how to roll them back.
    """

    layout: WindowLayout
    n_heads: int
    reference_points: np.ndarray
    offsets: np.ndarray
    deformed: np.ndarray
    attention: np.ndarray


def _offset_forward(q_heads: Tensor, dw_w, dw_b, pw_w, pw_b,
                    ws: int, gamma_off: float) -> Tensor:
    """(B, n_w, n_h, P, d) queries -> (B, n_w, n_h, P, 2) bounded offsets."""
    b, nw, nh, p, d = q_heads.shape
    c = nh * d
    g = transpose(q_heads, (0, 1, 2, 4, 3))
    g = reshape(g, (b * nw, c, ws, ws))
    hdw = conv2d(g, dw_w, dw_b, stride=1, padding=OFFSET_KERNEL // 2, groups=c)
    hpw = conv2d(gelu(hdw), pw_w, pw_b, groups=nh)  # (B*n_w, 2*n_h, ws, ws)
    o = reshape(hpw, (b, nw, nh, 2, p))
    o = transpose(o, (0, 1, 2, 4, 3))
    return tanh(o) * (gamma_off * ws / 2.0)


def compute_offsets(q_win, params: SdmsaParams, head: int) -> Tensor:
    """Offsets for one window and one head: (P, d) queries -> (P, 2)."""
    if not params.deformable:
        raise ValueError("offset net absent: layer built with deform=False")
    q = _as_tensor(q_win)
    p, d = q.shape
    qh = reshape(q, (1, 1, 1, p, d))
    return reshape(
        _offset_forward(
            qh,
            narrow(params.off_dw_w, 0, head * d, d),
            narrow(params.off_dw_b, 0, head * d, d),
            narrow(params.off_pw_w, 0, head * 2, 2),
            narrow(params.off_pw_b, 0, head * 2, 2),
            params.ws,
            params.gamma_off,
        ),
        (p, 2),
    )


def _bias_points(table: Tensor, points: Tensor) -> Tensor:
    """Sample (N, 1, t, t) tables at (N, M, 2) displacement grid points."""
    return bilinear_sample_batch(table, points)


def interpolated_bias(p_query, p_key_deformed, bias_table) -> Tensor:
    """Continuous-relative-position bias matrix for one window and head.

    Entry [i, j] reads the (2*ws-1)^2 table at displacement
    p_key_deformed[j] - p_query[i], bilinearly interpolated and clamped to
    the table's range, so integer displacements reproduce the table values
    exactly.
    """
    table = _as_tensor(bias_table)
    t = table.shape[-1]
    ws = (t + 1) // 2
    pq = _as_tensor(p_query, like=table)
    pk = _as_tensor(p_key_deformed, like=table)
    p = pq.shape[0]
    delta = reshape(pk, (1, p, 2)) - reshape(pq, (p, 1, 2)) + float(ws - 1)
    out = _bias_points(reshape(table, (1, 1, t, t)), reshape(delta, (1, p * p, 2)))
    return reshape(out, (p, p))


def sdmsa(x, params: SdmsaParams, layout: WindowLayout,
          deform: bool = True) -> tuple[Tensor, SdmsaTrace]:
    """Windowed multi-head attention; returns (output, trace).

    deform=True samples keys/values at query-conditioned offsets from the
    whole shifted map; deform=False attends over the window's own patches.
    Output shape equals input shape.
    """
    if deform and not params.deformable:
        raise ValueError("deform=True but layer built without an offset net")
    xb, squeeze = _with_batch(x)
    b, c, h, w = xb.shape
    if (h, w) != (layout.h, layout.w):
        raise ValueError(f"map {h}x{w} does not match layout {layout}")
    nh = params.n_heads
    d = c // nh
    if d * nh != c or params.channels != c:
        raise ValueError("channel count does not match params")
    ws = layout.ws
    p = layout.patches
    nw = layout.n_windows

    xs = roll(xb, (-layout.shift, -layout.shift), (2, 3)) if layout.shift else xb
    wins = _split(xs, layout)                      # (B, n_w, P, C)
    xh = transpose(reshape(wins, (b, nw, p, nh, d)), (0, 1, 3, 2, 4))
    q = matmul(xh, params.wq)                      # (B, n_w, n_h, P, d)

    ref = reference_points(layout)                 # (n_w, P, 2) float64
    if deform:
        off = _offset_forward(
            q, params.off_dw_w, params.off_dw_b,
            params.off_pw_w, params.off_pw_b, ws, params.gamma_off,
        )
        if params.clamp_to_window:
            # keep samples inside their own window
            local = Tensor(_local_grid(ws).reshape(1, 1, 1, p, 2).astype(xb.dtype))
            raw = local + off
            ly = clip(narrow(raw, -1, 0, 1), 0.0, float(ws - 1))
            lx = clip(narrow(raw, -1, 1, 1), 0.0, float(ws - 1))
            org = window_origins(layout).reshape(1, nw, 1, 1, 2)
            pts = concat([ly, lx], -1) + Tensor(org.astype(xb.dtype))
        else:
            refs = Tensor(ref[:, None, :, :].reshape(1, nw, 1, p, 2).astype(xb.dtype))
            raw = refs + off
            py = clip(narrow(raw, -1, 0, 1), 0.0, float(h - 1))
            px = clip(narrow(raw, -1, 1, 1), 0.0, float(w - 1))
            pts = concat([py, px], -1)             # (B, n_w, n_h, P, 2)
        fs = reshape(xs, (b * nh, d, h, w))
        ptsr = reshape(transpose(pts, (0, 2, 1, 3, 4)), (b * nh, nw * p, 2))
        samp = bilinear_sample_batch(fs, ptsr)     # (B*n_h, n_w*P, d)
        kv_in = transpose(reshape(samp, (b, nh, nw, p, d)), (0, 2, 1, 3, 4))

        t = 2 * params.ws - 1
        refq = Tensor(ref.reshape(1, nw, 1, p, 1, 2).astype(xb.dtype))
        delta = reshape(pts, (b, nw, nh, 1, p, 2)) - refq + float(params.ws - 1)
        tables = broadcast_to(
            reshape(params.bias_table, (1, 1, nh, 1, t, t)), (b, nw, nh, 1, t, t)
        )
        bias = _bias_points(
            reshape(tables, (b * nw * nh, 1, t, t)),
            reshape(delta, (b * nw * nh, p * p, 2)),
        )
        bias = reshape(bias, (b, nw, nh, p, p))
        trace_off, trace_def = off, pts
    else:
        kv_in = xh
        t = 2 * params.ws - 1
        lg = _local_grid(ws)
        delta = (lg[None, :, :] - lg[:, None, :] + (params.ws - 1)).reshape(1, p * p, 2)
        dpts = Tensor(np.broadcast_to(delta, (nh, p * p, 2)).astype(xb.dtype))
        bias = _bias_points(reshape(params.bias_table, (nh, 1, t, t)), dpts)
        bias = reshape(bias, (1, 1, nh, p, p))
        trace_off, trace_def = None, None

    k = matmul(kv_in, params.wk)
    v = matmul(kv_in, params.wv)
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(d))
    attn = softmax(scores + bias, axis=-1)         # (B, n_w, n_h, P, P)
    z = matmul(attn, v)
    z = reshape(transpose(z, (0, 1, 3, 2, 4)), (b, nw, p, c))
    out = _stitch(matmul(z, params.wo), layout)
    if layout.shift:
        out = roll(out, (layout.shift, layout.shift), (2, 3))

    if trace_off is None:
        offs = np.zeros((b, nw, nh, p, 2), dtype=xb.dtype)
        defp = np.broadcast_to(
            ref.reshape(1, nw, 1, p, 2), (b, nw, nh, p, 2)
        ).astype(xb.dtype)
    else:
        offs, defp = trace_off.data, trace_def.data
    trace = SdmsaTrace(
        layout=layout,
        n_heads=nh,
        reference_points=ref,
        offsets=offs,
        deformed=defp,
        attention=attn.data,
    )
    return (reshape(out, out.shape[1:]) if squeeze else out), trace
