import subprocess
import sys

import numpy as np
import pytest

from focalmod.backbone import build_model, preset
from focalmod.cli import cli_main
from focalmod.pnm import write_ppm


def run(capsys, *argv):
    code = cli_main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_prints_usage(capsys):
    code, _, err = run(capsys)
    assert code == 1 and err.startswith("usage: focalmod")


def test_unknown_flag_is_usage_error(capsys):
    code, out, err = run(capsys, "count", "--preset", "micro", "--bogus")
    assert code == 1 and "usage:" in err and "--bogus" in err and out == ""


def test_count_prints_table(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", str(tmp_path), "count", "--preset", "focalnet-t-srf", "--res", "224")
    assert code == 0
    assert "28,435,948" in out and "1 multiply-accumulate = 1 FLOP" in out
    assert (tmp_path / "focalnet-t-srf_224.csv").read_text().startswith("name,params,flops,rL\n")


def test_count_unknown_preset(capsys):
    code, _, err = run(capsys, "count", "--preset", "nope")
    assert code == 1 and "unknown preset" in err


def test_gradcheck_passes_and_fails(capsys, tmp_path, monkeypatch):
    from focalmod import gradsuite
    from focalmod.tensor import GradCheckReport

    monkeypatch.setattr(gradsuite, "run_all", lambda seed, cfg: [GradCheckReport("ok", 1e-9, 0, 1e-5)])
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and out.startswith("PASS")
    monkeypatch.setattr(gradsuite, "run_all", lambda seed, cfg: [GradCheckReport("bad", 2e-4, 3, 1e-5)])
    code, out, _ = run(capsys, "gradcheck")
    assert code == 2 and out.startswith("FAIL  bad")


def test_gradcheck_config_selects_model(capsys, tmp_path, monkeypatch):
    from focalmod import gradsuite

    seen = {}
    monkeypatch.setattr(gradsuite, "run_all", lambda seed, cfg: seen.setdefault("cfg", cfg) and [])
    cfg = tmp_path / "g.cfg"
    cfg.write_text("preset=micro\nmodel.dims=4,8\n")
    assert run(capsys, "gradcheck", "--config", str(cfg))[0] == 0
    assert seen["cfg"].dims == (4, 8)


def test_train_inspect_roundtrip(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset=micro\nmodel.dims=8,16\ntrain.total_steps=2\ntrain.batch_size=4\n"
                   "data.n_train=8\ndata.n_eval=4\ndata.resolution=32\n")
    code, out, _ = run(capsys, "--out", str(tmp_path / "run"), "train", "--config", str(cfg))
    assert code == 0 and "train_acc=" in out and "eval_acc=" in out
    ckpt = tmp_path / "run" / "model.fmt"
    assert ckpt.exists() and (tmp_path / "run" / "metrics.csv").exists()

    code, out, _ = run(capsys, "--out", str(tmp_path / "k"), "inspect", "kernels", "--ckpt", str(ckpt))
    assert code == 0 and "kernels_stage0_level1.pgm" in out

    img = tmp_path / "img.ppm"
    write_ppm(img, np.random.default_rng(0).integers(0, 256, size=(32, 32, 3)).astype(np.uint8))
    code, out, _ = run(capsys, "--out", str(tmp_path / "m"), "inspect", "modulator", "--ckpt", str(ckpt),
                       "--image", str(img))
    assert code == 0 and "modulator.pgm" in out
    code, out, _ = run(capsys, "--out", str(tmp_path / "g"), "inspect", "gating", "--ckpt", str(ckpt),
                       "--image", str(img))
    assert code == 0 and out.count("gating_") == 6

    code, _, err = run(capsys, "inspect", "gating", "--ckpt", str(ckpt))
    assert code == 1 and "--image" in err


def test_inspect_unsupported_is_reported(capsys, tmp_path):
    m = build_model(preset("micro", dims=(8, 16), use_gating=False), seed=0)
    m.save(tmp_path / "m.fmt")
    img = tmp_path / "img.ppm"
    write_ppm(img, np.zeros((32, 32, 3), np.uint8))
    code, _, err = run(capsys, "--out", str(tmp_path), "inspect", "gating", "--ckpt", str(tmp_path / "m.fmt"),
                       "--image", str(img))
    assert code == 1 and "UnsupportedError" in err


def test_bad_config_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs=3\n")
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 1 and "epochs" in err


def test_bench(capsys):
    code, out, _ = run(capsys, "bench", "--preset", "micro", "--res", "32", "--repeat", "1")
    assert code == 0 and "GFLOP/s" in out


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("FOCALMOD_THREADS", "zero")
    code, _, err = run(capsys, "count", "--preset", "micro", "--res", "32")
    assert code == 1 and "FOCALMOD_THREADS" in err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "focalmod.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
