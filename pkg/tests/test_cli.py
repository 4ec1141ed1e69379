import json

import numpy as np
import pytest

from sdah.cli import main
from sdah.io import load_sdt1, save_sdt1
from sdah.network import ModelConfig, build_model, count_params
from sdah.training import load_dataset

MICRO = {
    "in_channels": 1, "num_classes": 2, "stem_width": 8,
    "stage_widths": [8, 16, 32, 64], "window_sizes": [4, 4, 2, 2],
    "num_heads": [2, 2, 4, 4],
}


@pytest.fixture
def workdir(tmp_path):
    cfg = {"model": MICRO, "train": {"batch_size": 2, "max_steps": 2, "seed": 0}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["synth", "--n", "3", "--size", "32", "--classes", "2",
                 "--seed", "1", "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def _train(workdir, out=None):
    out = out or workdir / "run"
    code = main(["train", "--data", str(workdir / "data"),
                 "--config", str(workdir / "cfg.json"), "--out", str(out)])
    assert code == 0
    return out


# -- happy paths ------------------------------------------------------------------

def test_synth_writes_loadable_dataset(workdir, capsys):
    data = load_dataset(workdir / "data")
    assert len(data) == 3
    assert data[0].image.shape == (1, 32, 32)


def test_train_directory_layout(workdir, capsys):
    out = _train(workdir)
    assert (out / "checkpoint.sdck").exists()
    assert (out / "loss.csv").exists()
    stdout = capsys.readouterr().out
    assert "step" in stdout and "checkpoint:" in stdout


def test_train_explicit_checkpoint_file(workdir):
    out = _train(workdir, out=workdir / "model.sdck")
    assert out.exists()
    assert (workdir / "model.loss.csv").exists()


def test_train_print_config_merges_file(workdir, capsys):
    assert main(["train", "--config", str(workdir / "cfg.json"),
                 "--print-config"]) == 0
    merged = json.loads(capsys.readouterr().out)
    assert merged["model"]["stem_width"] == 8
    assert merged["train"]["max_steps"] == 2
    assert merged["train"]["base_lr"] == 2e-4   # default filled in


def test_infer_and_preview(workdir, capsys):
    out = _train(workdir)
    img = workdir / "img.sdt"
    save_sdt1(img, load_dataset(workdir / "data")[0].image.data.astype(np.float32))
    mask_path = workdir / "mask.sdt"
    code = main(["infer", "--ckpt", str(out / "checkpoint.sdck"),
                 "--image", str(img), "--crop", "32", "--step", "32",
                 "--out", str(mask_path), "--preview", str(workdir / "m.pgm")])
    assert code == 0
    mask = load_sdt1(mask_path)
    assert mask.dtype == np.uint8 and mask.shape == (32, 32)
    pgm = (workdir / "m.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n")
    assert len(pgm) == len(b"P5\n32 32\n255\n") + 32 * 32


def test_eval_writes_csv_and_summary_line(workdir, capsys):
    out = _train(workdir)
    code = main(["eval", "--ckpt", str(out / "checkpoint.sdck"),
                 "--data", str(workdir / "data"), "--crop", "32",
                 "--step", "32", "--out", str(workdir / "eval.csv")])
    assert code == 0
    assert "mean DSC" in capsys.readouterr().out
    lines = (workdir / "eval.csv").read_text().splitlines()
    assert lines[0] == "case,class,dsc,hd95"
    assert len(lines) > 3


def test_explain_exports_bundle(workdir, capsys):
    out = _train(workdir)
    img = workdir / "img.sdt"
    save_sdt1(img, load_dataset(workdir / "data")[0].image.data.astype(np.float32))
    code = main(["explain", "--ckpt", str(out / "checkpoint.sdck"),
                 "--image", str(img), "--block", "enc1", "--class", "1",
                 "--out", str(workdir / "xa")])
    assert code == 0
    for name in ("attn.sdt", "attn.pgm", "points.csv", "field.ppm", "gradcam.pgm"):
        assert (workdir / "xa" / "enc1" / name).exists()


def test_count_matches_library(workdir, capsys):
    assert main(["count", "--config", str(workdir / "cfg.json"),
                 "--size", "32"]) == 0
    stdout = capsys.readouterr().out
    want = count_params(build_model(ModelConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in MICRO.items()})))
    assert f"params: {want}" in stdout
    assert "flops@32x32:" in stdout


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "selfcheck passed" in out
    assert out.count(": ok") == 8


# -- failure modes ------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["synth", "--size", "32", "--out", "x"],          # missing --n
    ["train"],                                        # missing --data/--out
    ["bogus"],                                        # unknown command
    ["infer", "--ckpt", "a"],                         # missing image/out
])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert main(argv) == 1
    assert "usage error" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path, capsys):
    assert main(["infer", "--ckpt", str(tmp_path / "no.sdck"),
                 "--image", str(tmp_path / "no.sdt"),
                 "--out", str(tmp_path / "o.sdt")]) == 2
    assert main(["train", "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "r")]) == 2


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"stem_width": 8}, "optimizer": {}}))
    assert main(["train", "--config", str(bad), "--print-config"]) == 2
    bad.write_text(json.dumps({"model": {"learning_rate": 1.0}}))
    assert main(["count", "--config", str(bad), "--size", "32"]) == 2


def test_indivisible_size_exits_2(tmp_path, capsys):
    assert main(["count", "--size", "33"]) == 2


def test_nonfinite_data_exits_3(workdir, capsys):
    save_sdt1(workdir / "data" / "img_00000.sdt",
              np.full((1, 32, 32), np.nan, dtype=np.float32))
    assert main(["train", "--data", str(workdir / "data"),
                 "--out", str(workdir / "run")]) == 3
    assert "numerical failure" in capsys.readouterr().err
