import csv
import subprocess
import sys

import numpy as np
import pytest

from noisematch.cli import main
from noisematch.image import test_card
from noisematch.io import load_model, read_pnm, read_xyz, write_pnm

TINY = """\
epochs = 2
patch_size = 60
n_steps = 1
k_neighbors = 4
edgeconv_layers = 1
feature_width = 4
predictor_widths = 4,3
"""


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--shapes", "sphere", "--points", "60", "--observations", "2",
                 "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def trained(workdir, name="model", *extra):
    out = workdir / name
    code = main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "tiny.cfg"),
                 "--out", str(out), *extra])
    assert code == 0
    return out


def entry(workdir):
    return next(p for p in (workdir / "data").iterdir() if p.is_dir())


def test_train_outputs_and_determinism(workdir):
    a = trained(workdir, "a")
    b = trained(workdir, "b")
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    rows = list(csv.DictReader(open(a / "loss_log.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert "lambda_dc = 1.0" in (a / "train_config.txt").read_text()
    params, extra = load_model(a / "model.ckpt")
    assert params.config.n_steps == 1 and extra["noise_level"] == 0.02


def test_cli_overrides_config(workdir):
    out = trained(workdir, "m", "--lambda-dc", "0.1", "--steps", "2", "--binary")
    params, _ = load_model(out / "model.ckpt")
    assert params.config.n_steps == 2
    assert "lambda_dc = 0.1" in (out / "train_config.txt").read_text()


def test_denoise_upsample_eval(workdir):
    model = trained(workdir) / "model.ckpt"
    e = entry(workdir)
    out = workdir / "res"
    assert main(["denoise", "--in", str(e / "noisy_0.xyz"), "--model", str(model),
                 "--patch-size", "60", "--out", str(out)]) == 0
    den = read_xyz(out / "noisy_0_denoised.xyz")
    assert den.shape == (60, 3)
    assert main(["denoise", "--in", str(e / "noisy_0.xyz"), "--model", str(model),
                 "--patch-size", "60", "--output", str(out / "again.xyz")]) == 0
    assert (out / "again.xyz").read_bytes() == (out / "noisy_0_denoised.xyz").read_bytes()

    assert main(["upsample", "--in", str(e / "clean.xyz"), "--model", str(model), "--ratio", "2",
                 "--patch-size", "60", "--out", str(out)]) == 0
    assert read_xyz(out / "clean_x2.xyz").shape == (120, 3)

    assert main(["eval", "--pred", str(out / "noisy_0_denoised.xyz"), str(e / "noisy_1.xyz"),
                 "--clean", str(e / "clean.xyz"), "--mesh", str(e / "mesh.off"),
                 "--noise-level", "0.02", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["shape_id"] for r in rows] == ["noisy_0_denoised", "noisy_1"]
    assert all(float(r["cd_x1e4"]) > 0 and float(r["p2m_x1e4"]) > 0 for r in rows)
    assert (out / "metrics_summary.csv").exists()


def test_global_flags_after_subcommand(workdir):
    out = workdir / "g"
    assert main(["gen-data", "--shapes", "torus", "--points", "30", "--out", str(out), "--seed", "3",
                 "--threads", "1"]) == 0
    assert main(["--seed", "3", "--out", str(workdir / "h"), "gen-data", "--shapes", "torus",
                 "--points", "30"]) == 0
    a = sorted(p.read_bytes() for p in out.rglob("*.xyz"))
    b = sorted(p.read_bytes() for p in (workdir / "h").rglob("*.xyz"))
    assert a == b


def test_ablate_on_data_dir(workdir):
    out = workdir / "abl"
    assert main(["ablate", "--study", "lambda_dc", "--data", str(workdir / "data"), "--seeds", "1",
                 "--values", "0,1", "--config", str(workdir / "tiny.cfg"), "--epochs", "1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablate_lambda_dc.csv")))
    assert [r["value"] for r in rows] == ["0.0", "1.0"] and {r["status"] for r in rows} == {"ok"}


def test_image_commands(tmp_path):
    write_pnm(tmp_path / "card.pgm", test_card(16, 0))
    assert main(["image-denoise", "--in", str(tmp_path / "card.pgm"), "--noise", "poisson:25",
                 "--iterations", "3", "--out", str(tmp_path / "den.pgm")]) == 0
    assert read_pnm(tmp_path / "den.pgm").shape == (16, 16)
    assert main(["image-eval", "--in", str(tmp_path / "card.pgm"), "--suite", "1", "--crop", "16",
                 "--iterations", "3", "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "image_eval.csv")))
    assert [r["image_id"] for r in rows] == ["card", "card0"]
    assert all(float(r["psnr_noisy"]) > 0 for r in rows)


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["denoise", "--in", "x.xyz"],
                                  ["gen-data", "--points", "abc"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_data_errors_exit_3(workdir, tmp_path):
    bad = tmp_path / "bad.xyz"
    bad.write_text("1 2 nan\n")
    model = trained(workdir) / "model.ckpt"
    assert main(["denoise", "--in", str(bad), "--model", str(model), "--out", str(tmp_path)]) == 3
    assert main(["denoise", "--in", str(tmp_path / "missing.xyz"), "--model", str(model)]) == 3
    assert main(["gen-data", "--noise", "0.5", "--out", str(tmp_path / "x")]) == 3
    assert main(["eval", "--pred", str(entry(workdir) / "noisy_0.xyz")]) == 3
    assert main(["image-denoise", "--in", str(tmp_path / "nope.pgm")]) == 3
    assert main(["image-eval", "--out", str(tmp_path)]) == 3


def test_divergence_exit_4(workdir):
    cfg = workdir / "huge.cfg"
    cfg.write_text(TINY.replace("epochs = 2", "epochs = 5") + "learning_rate = 1e300\n")
    out = workdir / "div"
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(workdir / "data"), "--config", str(cfg), "--out", str(out)])
    assert code == 4
    params, _ = load_model(out / "model.ckpt")
    assert all(np.all(np.isfinite(v)) for v in params.arrays.values())
    assert (out / "loss_log.csv").exists()


def test_console_script():
    res = subprocess.run([sys.executable, "-m", "noisematch.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "denoise", "upsample", "eval", "ablate", "image-denoise", "image-eval"):
        assert cmd in res.stdout
