"""Bilinear feature sampling at continuous (y, x) pixel coordinates.

Coordinates are clamped to [0, H-1] x [0, W-1] before the 4-neighbor blend
(border mode), so sampling at integer in-range points reproduces pixel
values exactly and out-of-range points read the nearest border pixel.
Differentiable with respect to both the feature map and the points; the
point gradient is zero wherever the clamp is active.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _as_tensor, _make, no_grad, reshape


def bilinear_sample_batch(f, points) -> Tensor:
    """Sample f: (B, C, H, W) at points: (B, P, 2) -> (B, P, C)."""
    f = _as_tensor(f)
    points = _as_tensor(points, like=f)
    if f.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2:
        raise ValueError(
            f"bilinear_sample_batch expects (B,C,H,W) and (B,P,2), "
            f"got {f.shape} and {points.shape}"
        )
    if f.shape[0] != points.shape[0]:
        raise ValueError("batch dims of features and points differ")
    b, c, h, w = f.shape
    p = points.shape[1]

    y = np.clip(points.data[..., 0], 0.0, h - 1.0)
    x = np.clip(points.data[..., 1], 0.0, w - 1.0)
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = y - y0
    fx = x - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    y1i = np.minimum(y0i + 1, h - 1)
    x1i = np.minimum(x0i + 1, w - 1)

    flat = f.data.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi)[:, None, :]  # (B,1,P)
        return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, p)), axis=2)

    v00 = gather(y0i, x0i)  # (B,C,P)
    v01 = gather(y0i, x1i)
    v10 = gather(y1i, x0i)
    v11 = gather(y1i, x1i)

    w00 = ((1 - fy) * (1 - fx))[:, None, :]
    w01 = ((1 - fy) * fx)[:, None, :]
    w10 = (fy * (1 - fx))[:, None, :]
    w11 = (fy * fx)[:, None, :]
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).transpose(0, 2, 1)

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # (B,C,P)
        df = None
        if f.requires_grad:
            df = np.zeros_like(f.data).reshape(b, c, h * w)
            bi = np.arange(b)[:, None, None]
            ci = np.arange(c)[None, :, None]
            for yi, xi, ww in (
                (y0i, x0i, w00),
                (y0i, x1i, w01),
                (y1i, x0i, w10),
                (y1i, x1i, w11),
            ):
                idx = (yi * w + xi)[:, None, :]
                np.add.at(df, (bi, ci, idx), gt * ww)
            df = df.reshape(f.data.shape)
        dp = None
        if points.requires_grad:
            # derivative through the blend weights; zero where clamped
            dy = (1 - fx)[:, None, :] * (v10 - v00) + fx[:, None, :] * (v11 - v01)
            dx = (1 - fy)[:, None, :] * (v01 - v00) + fy[:, None, :] * (v11 - v10)
            ry = points.data[..., 0]
            rx = points.data[..., 1]
            my = ((ry > 0.0) & (ry < h - 1.0)).astype(g.dtype)
            mx = ((rx > 0.0) & (rx < w - 1.0)).astype(g.dtype)
            dp = np.stack(
                [(gt * dy).sum(axis=1) * my, (gt * dx).sum(axis=1) * mx], axis=-1
            )
        return df, dp

    return _make("bilinear_sample", out, (f, points), bwd)


def bilinear_sample(f, points) -> Tensor:
    """Sample f: (C, H, W) at points: (P, 2) in (y, x) order -> (P, C)."""
    f = _as_tensor(f)
    points = _as_tensor(points, like=f)
    if f.ndim != 3 or points.ndim != 2:
        raise ValueError(
            f"bilinear_sample expects (C,H,W) and (P,2), got {f.shape} and {points.shape}"
        )
    fb = reshape(f, (1,) + f.shape)
    pb = reshape(points, (1,) + points.shape)
    out = bilinear_sample_batch(fb, pb)
    return reshape(out, out.shape[1:])


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain numpy bilinear resize of (C, H, W), pixel-center aligned."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()], axis=-1)[None]
    with no_grad():
        out = bilinear_sample_batch(
            Tensor(img[None], dtype=np.float64), Tensor(pts, dtype=np.float64)
        )
    return out.data[0].T.reshape(c, out_h, out_w).astype(img.dtype)
