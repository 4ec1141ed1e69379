"""Command-line driver: synth / train / infer / eval / explain / count /
selfcheck.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical
failure, 4 selfcheck failure.  All commands are deterministic for a fixed
seed; reruns write byte-identical outputs.

The JSON config mirrors the dataclass fields exactly, namespaced as
{"model": {...}, "train": {...}}; both sections are optional and
unknown keys are rejected.  `train --print-config` shows the effective
merged config without running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .gradcheck import GradCheckError
from .io import FormatError, load_sdt1, save_sdt1, to_u8, write_pgm
from .inference import SlidingConfig, predict_mask, sliding_predict
from .network import ModelConfig, build_model, count_flops, count_params, load_model
from .tensor import GradError, NumericsError
from .training import (
    TrainConfig,
    TrainingAborted,
    load_dataset,
    save_dataset,
    synth_dataset,
    train,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise _UsageError(message)


def _load_configs(path) -> tuple[ModelConfig, TrainConfig]:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = json.loads(p.read_text())
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return (
        ModelConfig.from_dict(raw.get("model", {})),
        TrainConfig.from_dict(raw.get("train", {})),
    )


def _sliding(args) -> SlidingConfig:
    return SlidingConfig(crop=args.crop, step=args.step,
                         sigma_ratio=args.sigma_ratio)


def _cmd_synth(args) -> int:
    data = synth_dataset(args.n, args.size, args.size, args.classes, args.seed)
    save_dataset(args.out, data)
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    mcfg, tcfg = _load_configs(args.config)
    if args.print_config:
        print(json.dumps({"model": mcfg.to_dict(), "train": tcfg.to_dict()},
                         indent=2))
        return 0
    if args.data is None or args.out is None:
        raise _UsageError("train requires --data and --out")
    data = load_dataset(args.data)
    model = build_model(mcfg)
    out = Path(args.out)
    curve = out.with_suffix(".loss.csv") if out.suffix else out / "loss.csv"
    ckpt = out if out.suffix else out / "checkpoint.sdck"

    def log(row):
        print(f"step {row['step']:>6}  loss {row['loss']:.4f}  "
              f"dice {row['dice_loss']:.4f}  ce {row['ce_loss']:.4f}  "
              f"lr {row['lr']:.2e}")

    train(model, data, tcfg, ckpt_path=ckpt, curve_path=curve, log=log)
    print(f"checkpoint: {ckpt}\nloss curve: {curve}")
    return 0


def _cmd_infer(args) -> int:
    model, _ = load_model(args.ckpt)
    image = load_sdt1(args.image).astype(np.float32)
    if image.ndim == 2:
        image = image[None]
    mask = predict_mask(model, image, _sliding(args))
    save_sdt1(args.out, mask)
    if args.preview:
        write_pgm(args.preview, to_u8(mask))
    print(f"mask: {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_pairs, write_eval_csv

    model, _ = load_model(args.ckpt)
    data = load_dataset(args.data)
    cfg = _sliding(args)
    preds, gts = [], []
    classes = max(s.classes for s in data)
    for s in data:
        preds.append(predict_mask(model, s.image, cfg))
        gts.append(s.label.data)
    rows, summary = evaluate_pairs(preds, gts, classes)
    write_eval_csv(args.out, rows, summary)
    avg = summary["avg"]
    hd = "n/a" if avg["mean_hd95"] is None else f"{avg['mean_hd95']:.4f}"
    print(f"cases {len(data)}  mean DSC {avg['mean_dsc']:.4f}  "
          f"mean HD95 {hd}  hd95 excluded {avg['hd95_excluded']}")
    return 0


def _cmd_explain(args) -> int:
    from .explain import export_bundle

    model, _ = load_model(args.ckpt)
    image = load_sdt1(args.image).astype(np.float32)
    if image.ndim == 2:
        image = image[None]
    paths = export_bundle(model, image, args.block, args.cls, args.out,
                          stride=args.stride)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def _cmd_count(args) -> int:
    mcfg, _ = _load_configs(args.config)
    model = build_model(mcfg)
    params = count_params(model)
    flops = count_flops(model, args.size, args.size)
    print(f"params: {params}")
    print(f"flops@{args.size}x{args.size}: {flops}")
    return 0


def _cmd_selfcheck(args) -> int:
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"selfcheck {name}: ok")
        except Exception as e:  # noqa: BLE001 - report and keep going
            failures.append(name)
            print(f"selfcheck {name}: FAIL ({e})")

    check("grad_ops", _selfcheck_grads)
    check("window_round_trip", _selfcheck_windows)
    check("zero_offset_equivalence", _selfcheck_zero_offset)
    check("conv_adjoint", _selfcheck_adjoint)
    check("sliding_tiles", _selfcheck_tiles)
    check("lr_schedule", _selfcheck_lr)
    check("metrics_oracle", _selfcheck_metrics)
    check("formats_round_trip", _selfcheck_formats)
    if failures:
        print(f"selfcheck failed: {', '.join(failures)}")
        return 4
    print("selfcheck passed")
    return 0


def _selfcheck_grads():
    from .gradcheck import grad_check
    from .rng import Stream
    from .tensor import gelu, matmul, softmax

    s = Stream(7)
    a = s.uniform((4, 4), -1, 1)
    b = s.uniform((4, 4), -1, 1)
    grad_check(matmul, [a, b], h=1e-5, tol=1e-6)
    grad_check(gelu, [s.uniform((3, 5), -2, 2)], h=1e-5, tol=1e-6)
    grad_check(lambda t: softmax(t, axis=-1), [s.uniform((2, 6), -2, 2)],
               h=1e-5, tol=1e-6)


def _selfcheck_windows():
    from .attention import WindowLayout, window_merge, window_partition
    from .rng import Stream
    from .tensor import Tensor

    s = Stream(11)
    for shift in (0, 2):
        lay = WindowLayout(8, 8, 4, shift)
        x = Tensor(s.uniform((3, 8, 8), -1, 1))
        back = window_merge(window_partition(x, lay), lay)
        if not np.array_equal(back.data, x.data):
            raise AssertionError("window round trip not exact")


def _selfcheck_zero_offset():
    from .attention import SdmsaParams, WindowLayout, sdmsa
    from .rng import Stream
    from .tensor import Tensor

    s = Stream(13)
    params = SdmsaParams.init(8, 2, 4, s, deform=True)
    for t in (params.off_dw_w, params.off_dw_b, params.off_pw_w, params.off_pw_b):
        t.data[...] = 0.0
    lay = WindowLayout(8, 8, 4, 2)
    x = Tensor(s.uniform((8, 8, 8), -1, 1))
    a, _ = sdmsa(x, params, lay, deform=True)
    b, _ = sdmsa(x, params, lay, deform=False)
    diff = np.abs(a.data - b.data).max()
    if diff > 1e-6:
        raise AssertionError(f"zero-offset gap {diff:.2e}")


def _selfcheck_adjoint():
    from .convops import conv2d, deconv2d
    from .rng import Stream
    from .tensor import Tensor

    # <conv(x, w), g> == <x, deconv(g, w)> with the shared weight array
    s = Stream(17)
    x = Tensor(s.uniform((1, 3, 8, 8), -1, 1))
    w = Tensor(s.uniform((5, 3, 2, 2), -1, 1))
    g = Tensor(s.uniform((1, 5, 4, 4), -1, 1))
    lhs = float((conv2d(x, w, stride=2).data * g.data).sum())
    rhs = float((x.data * deconv2d(g, w, stride=2).data).sum())
    if abs(lhs - rhs) > 1e-5 * max(1.0, abs(lhs)):
        raise AssertionError(f"adjoint mismatch {lhs} vs {rhs}")


def _selfcheck_tiles():
    from .inference import tile_positions

    if tile_positions(64, 32, 16) != [0, 16, 32]:
        raise AssertionError("tile enumeration changed")


def _selfcheck_lr():
    from .training import TrainConfig, lr_at

    cfg = TrainConfig(base_lr=2e-4, decay_start_step=50_000, decay_every=10_000)
    got = (lr_at(0, cfg), lr_at(50_000, cfg), lr_at(69_999, cfg))
    if got != (2e-4, 1e-4, 5e-5):
        raise AssertionError(f"lr schedule {got}")


def _selfcheck_metrics():
    from .metrics import dsc, hd95

    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[0, 0] = True
    b[3, 4] = True
    if hd95(a, b) != 5.0 or dsc(a, a) != 1.0 or dsc(a, b) != 0.0:
        raise AssertionError("metric spot values")


def _selfcheck_formats():
    import tempfile

    from .io import load_sdt1 as _l, save_sdt1 as _s

    with tempfile.TemporaryDirectory() as d:
        arr = np.arange(12, dtype=np.float32).reshape(3, 4)
        _s(Path(d) / "t.sdt", arr)
        if not np.array_equal(_l(Path(d) / "t.sdt"), arr):
            raise AssertionError("SDT1 round trip")


def build_parser() -> _Parser:
    p = _Parser(prog="sdah", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--out", help="checkpoint path (or directory)")
    s.add_argument("--print-config", action="store_true")
    s.set_defaults(func=_cmd_train)

    def add_sliding(sp):
        sp.add_argument("--crop", type=int, default=224)
        sp.add_argument("--step", type=int, default=112)
        sp.add_argument("--sigma-ratio", type=float, default=1.0 / 8.0)

    s = sub.add_parser("infer", help="sliding-window inference on one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    add_sliding(s)
    s.add_argument("--out", required=True, help="argmax mask (SDT1 u8)")
    s.add_argument("--preview", help="optional PGM preview path")
    s.set_defaults(func=_cmd_infer)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    add_sliding(s)
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("explain", help="export explanation artifacts")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--block", required=True)
    s.add_argument("--class", dest="cls", type=int, default=1)
    s.add_argument("--stride", type=int, default=1,
                   help="keep every stride-th deformation point row")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_explain)

    s = sub.add_parser("count", help="parameter and FLOP counts")
    s.add_argument("--config")
    s.add_argument("--size", type=int, required=True)
    s.set_defaults(func=_cmd_count)

    s = sub.add_parser("selfcheck", help="run built-in consistency checks")
    s.set_defaults(func=_cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (NumericsError, GradError, TrainingAborted, GradCheckError,
            ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, FormatError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
