"""Explanation artifacts: attention heatmaps, deformation point tables,
deformation fields, and Grad-CAM for segmentation.

Everything here is a pure function of (parameters, image), so re-exports
are byte-identical.  Traces come straight from the forward pass: deformed
coordinates are exactly the ones the sampler used (post-clamp), letting a
replay test reproduce the CSV bit for bit.
"""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np

from .attention import SdmsaTrace
from .io import save_sdt1, to_u8, write_pgm, write_ppm
from .network import BLOCK_IDS, Model, forward
from .sampling import bilinear_resize
from .tensor import Tensor, narrow, tsum


def _splat(acc: np.ndarray, ys: np.ndarray, xs: np.ndarray,
           vals: np.ndarray) -> None:
    """Bilinear scatter-add of vals at continuous (ys, xs) into acc."""
    h, w = acc.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    flat = acc.reshape(-1)
    for yi, xi, ww in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        np.add.at(flat, yi * w + xi, vals * ww)


def attention_heatmap(trace: SdmsaTrace, agg: str = "sum",
                      normalize: bool = True, batch: int = 0) -> np.ndarray:
    """(H, W) map of attention received per key location.

    Column sums of each window/head attention matrix are splatted at the
    deformed key coordinates (so mass lands where the keys were actually
    sampled), accumulated over heads, rolled back to the unshifted frame,
    and min-max normalized.  agg="mean" divides by the query count.
    """
    if trace is None:
        raise ValueError("no attention trace for this block")
    if agg not in ("sum", "mean"):
        raise ValueError("agg must be 'sum' or 'mean'")
    layout = trace.layout
    attn = np.asarray(trace.attention, dtype=np.float64)[batch]
    pts = np.asarray(trace.deformed, dtype=np.float64)[batch]
    received = attn.sum(axis=-2)  # (n_w, n_h, P): weight landing on key j
    if agg == "mean":
        received = received / attn.shape[-2]
    acc = np.zeros((layout.h, layout.w), dtype=np.float64)
    _splat(acc, pts[..., 0].ravel(), pts[..., 1].ravel(), received.ravel())
    if layout.shift:
        acc = np.roll(acc, (layout.shift, layout.shift), axis=(0, 1))
    if not normalize:
        return acc
    lo, hi = acc.min(), acc.max()
    if hi <= lo:
        return acc
    return (acc - lo) / (hi - lo)


def deformation_rows(trace: SdmsaTrace, block: str, stride: int = 1,
                     batch: int = 0) -> list[tuple]:
    """(block, window, head, ref_y, ref_x, def_y, def_x) per sample point.

    Coordinates are in the shifted frame, exactly as used by the sampler;
    `stride` keeps every stride-th point per window for legibility.
    """
    if trace is None:
        raise ValueError("no attention trace for this block")
    ref = np.asarray(trace.reference_points)
    defp = np.asarray(trace.deformed)[batch]
    nw, nh, p = defp.shape[:3]
    rows = []
    for wi in range(nw):
        for hi in range(nh):
            for pi in range(0, p, stride):
                ry, rx = ref[wi, pi]
                dy, dx = defp[wi, hi, pi]
                rows.append((block, wi, hi, float(ry), float(rx),
                             float(dy), float(dx)))
    return rows


def points_csv_bytes(trace: SdmsaTrace, block: str, stride: int = 1) -> bytes:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "window", "head", "ref_y", "ref_x", "def_y", "def_x"])
    for row in deformation_rows(trace, block, stride):
        w.writerow([row[0], row[1], row[2],
                    repr(row[3]), repr(row[4]), repr(row[5]), repr(row[6])])
    return buf.getvalue().encode()


def deformation_field(trace: SdmsaTrace, max_offset: float | None = None,
                      batch: int = 0) -> np.ndarray:
    """(H, W, 3) u8 image: dy -> red, dx -> green around 128, |d| -> blue.

    Offsets are averaged over heads at each reference pixel and rolled back
    to the unshifted frame.  `max_offset` fixes the color scale (defaults
    to ws/2, the tanh bound at gamma_off=1).
    """
    if trace is None:
        raise ValueError("no attention trace for this block")
    layout = trace.layout
    if max_offset is None:
        max_offset = max(layout.ws / 2.0, 1e-12)
    off = np.asarray(trace.offsets, dtype=np.float64)[batch].mean(axis=1)
    ref = np.asarray(trace.reference_points).astype(np.int64)
    field = np.zeros((layout.h, layout.w, 2), dtype=np.float64)
    field[ref[..., 0], ref[..., 1]] = off
    if layout.shift:
        field = np.roll(field, (layout.shift, layout.shift), axis=(0, 1))
    unit = np.clip(field / max_offset, -1.0, 1.0)
    mag = np.clip(np.hypot(field[..., 0], field[..., 1]) / max_offset, 0.0, 1.0)
    img = np.empty(field.shape[:2] + (3,), dtype=np.uint8)
    img[..., 0] = np.round(128.0 + unit[..., 0] * 127.0)
    img[..., 1] = np.round(128.0 + unit[..., 1] * 127.0)
    img[..., 2] = np.round(mag * 255.0)
    return img


def seg_grad_cam(model: Model, image, target_class: int, target_block: str,
                 roi_mask) -> np.ndarray:
    """(H, W) non-negative attribution map, max-normalized.

    Score is the sum of the target class's logits over the ROI; gradients
    are taken at the target block's output, channel-averaged into weights,
    and the weighted feature sum is rectified and upsampled.
    """
    roi = np.asarray(roi_mask).astype(bool)
    if not roi.any():
        raise ValueError("empty roi")
    if target_block not in BLOCK_IDS:
        raise ValueError(f"unknown block {target_block!r}")
    logits, info = forward(model, image, taps=(target_block,))
    k = logits.shape[-3]
    if not 0 <= target_class < k:
        raise ValueError(f"class {target_class} outside [0, {k})")
    if roi.shape != logits.shape[-2:]:
        raise ValueError("roi shape does not match the image")
    cls = narrow(logits, -3, target_class, 1)
    score = tsum(cls * Tensor(roi, dtype=cls.dtype))
    score.backward()
    feat = info.taps[target_block]           # (1, C, h, w)
    grad = feat.grad
    if grad is None:
        raise RuntimeError("no gradient reached the tapped block")
    weights = grad.mean(axis=(2, 3), keepdims=True)          # (1, C, 1, 1)
    cam = np.maximum((weights * feat.data).sum(axis=1), 0.0)  # (1, h, w)
    h, w = roi.shape
    cam = bilinear_resize(cam.astype(np.float64), h, w)[0]
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def cam_channel_weights(model: Model, image, target_class: int,
                        target_block: str, roi_mask) -> np.ndarray:
    """The (C,) Grad-CAM channel weights alone (for sensitivity checks)."""
    roi = np.asarray(roi_mask).astype(bool)
    if not roi.any():
        raise ValueError("empty roi")
    logits, info = forward(model, image, taps=(target_block,))
    cls = narrow(logits, -3, target_class, 1)
    score = tsum(cls * Tensor(roi, dtype=cls.dtype))
    score.backward()
    return info.taps[target_block].grad.mean(axis=(2, 3))[0]


def export_bundle(model: Model, image, block: str, target_class: int,
                  out_dir, roi_mask=None, stride: int = 1) -> dict:
    """Write attn.pgm/attn.sdt/points.csv/field.ppm/gradcam.pgm for one
    block under out_dir/<block>/; returns the artifact paths.

    The ROI defaults to the pixels argmax-predicted as the target class.
    """
    if block not in BLOCK_IDS:
        raise ValueError(f"unknown block {block!r}")
    logits, info = forward(model, image)
    trace = info.traces[block]
    if roi_mask is None:
        pred = np.argmax(logits.data, axis=-3)
        if pred.ndim == 3:       # batched input: artifacts describe image 0
            pred = pred[0]
        roi_mask = pred == target_class
    d = Path(out_dir) / block
    d.mkdir(parents=True, exist_ok=True)
    paths = {}

    if trace is not None:
        heat = attention_heatmap(trace)
        save_sdt1(d / "attn.sdt", heat.astype(np.float32))
        write_pgm(d / "attn.pgm", to_u8(heat))
        (d / "points.csv").write_bytes(points_csv_bytes(trace, block, stride))
        write_ppm(d / "field.ppm", deformation_field(trace))
        paths.update(
            attn_sdt=d / "attn.sdt", attn_pgm=d / "attn.pgm",
            points=d / "points.csv", field=d / "field.ppm",
        )
    cam = seg_grad_cam(model, image, target_class, block, roi_mask)
    write_pgm(d / "gradcam.pgm", to_u8(cam))
    paths["gradcam"] = d / "gradcam.pgm"
    return paths
