"""Acceptance checks, one test per criterion.

Each test prints a ``[PASS]`` / ``[FAIL]`` line with the measured value and
the threshold; the lines are repeated together at the end of the pytest
run.  The training-based criteria are slow (about an hour in total on one
core); they share trained models through module-level caches.
"""
import csv
import functools
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from noisematch.autodiff import grad_check
from noisematch.cli import main
from noisematch.errors import SupervisionLeak
from noisematch.geometry import normalize_patch, sample_parametric_shape
from noisematch.image import ZsConfig, apply_noise, psnr, test_card_suite, zs_denoise
from noisematch.network import DenoiserConfig, denoise_multistep, init_params
from noisematch.pipeline import ablate, cell_medians, merged_noisy, score_dataset, toy_dataset, upsample
from noisematch.training import ObservationSet, TrainConfig, loss_n2c, total_loss, train
from noisematch.transport import chamfer_distance, emd_bruteforce, emd_exact, emd_gradient

from .graphs import random_graph

pytestmark = pytest.mark.slow

SEEDS_C5 = (0, 1, 2)
TREND_SEEDS = (0, 1, 2, 3, 4)
# trend set: 3% noise, sphere + torus, 4 observations; 500-point clouds
# trained as single 500-point patches for the default 200 epochs
TREND_POINTS = 500
TREND_SIGMA = 0.03


def fmt(d):
    return "{" + ", ".join(f"{k}: {v:.3f}" for k, v in d.items()) + "}"


# --- shared runs ----------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def toy_runs():
    """Default training on the 1K / 2% sphere+torus set, one run per seed."""
    data = toy_dataset(("sphere", "torus"), 1000, 0.02, 4, seed=0)
    hidden = [o.without_clean() for o in data]
    out = {}
    for seed in SEEDS_C5:
        t0 = time.perf_counter()
        params = train(hidden, TrainConfig(seed=seed)).params
        elapsed = time.perf_counter() - t0
        rows = score_dataset(params, data, patch_size=1000, seed=seed)
        out[seed] = (params, rows, elapsed)
    return out


@functools.lru_cache(maxsize=None)
def trend_rows():
    data = toy_dataset(("sphere", "torus"), TREND_POINTS, TREND_SIGMA, 4, seed=0)
    base = TrainConfig(patch_size=TREND_POINTS)
    return {
        "lambda_dc": ablate("lambda_dc", data, base, TREND_SEEDS, (0.0, 0.1, 1.0)),
        # lambda_dc = 1.0 with 4 steps and EMD is the base configuration, so the
        # 4-step and emd cells are taken from the lambda study
        "steps": ablate("steps", data, base, TREND_SEEDS, (1,)),
        "loss_metric": ablate("loss_metric", data, base, TREND_SEEDS, ("cd", "dcd")),
    }


def noisy_median(rows):
    per = {}
    for r in rows:
        per.setdefault(r["seed"], []).append(r["cd_noisy_x1e4"])
    return float(np.median([np.mean(v) for v in per.values()]))


# --- criteria ---------------------------------------------------------------------------


def test_c01_emd_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 10))
        X, Y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        worst = max(worst, abs(emd_exact(X, Y).cost - emd_bruteforce(X, Y)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    assert verdict(1, "EMD oracle", ok, f"max |exact - brute| = {worst:.2e} (<= 1e-9), {elapsed:.1f} s (< 10 s)")


def _unique_optimum(X, Y, margin=1e-3):
    import itertools

    n = len(X)
    c = np.sqrt(((X[:, None] - Y[None]) ** 2).sum(-1))
    costs = sorted(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
    return costs[1] - costs[0] > margin


def test_c02_emd_gradient(verdict):
    rng = np.random.default_rng(7)
    h = 1e-5
    worst = 0.0
    done = 0
    while done < 50:
        X, Y = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        if not _unique_optimum(X, Y):
            continue
        g = emd_gradient(X, Y, emd_exact(X, Y))
        num = np.zeros_like(X)
        for i in range(6):
            for j in range(3):
                Xp, Xm = X.copy(), X.copy()
                Xp[i, j] += h
                Xm[i, j] -= h
                num[i, j] = (emd_exact(Xp, Y).cost - emd_exact(Xm, Y).cost) / (2 * h)
        worst = max(worst, float(np.abs(num - g).max() / max(np.abs(num).max(), 1e-12)))
        done += 1
    assert verdict(2, "EMD gradient", worst < 1e-4, f"max relative error {worst:.2e} over 50 instances (< 1e-4)")


def test_c03_autodiff(verdict):
    fuzz = max(grad_check(*random_graph(seed), h=1e-4).max_rel_error for seed in range(100))
    cfg = DenoiserConfig(n_steps=2, k_neighbors=4, edgeconv_layers=2, feature_width=6, predictor_widths=(5, 3))
    params = init_params(cfg, 0)
    rng = np.random.default_rng(7)
    arrays = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in params.arrays.items()}

    def patch(seed):
        pts = sample_parametric_shape("sphere", 32, seed).points
        return normalize_patch(pts + np.random.default_rng(seed).normal(scale=0.03, size=pts.shape))[0]

    pa, pb = patch(2), patch(3)

    def fn(p):
        ca, _ = denoise_multistep(pa, p, cfg)
        cb, _ = denoise_multistep(pb, p, cfg)
        return total_loss(ca, cb, pa, pb, lambda_dc=1.0)[0]

    full = grad_check(fn, arrays, h=1e-5).max_rel_error
    ok = fuzz < 1e-3 and full < 1e-3
    assert verdict(3, "autodiff audit", ok,
                   f"100 fuzzed graphs max rel {fuzz:.2e}, 32-point step loss {full:.2e} (< 1e-3)")


def test_c04_identity_at_init(verdict):
    rng = np.random.default_rng(4)
    cases = 0
    bad = 0
    for trial in range(24):
        n = int(rng.integers(17, 400))
        kind = trial % 3
        if kind == 0:
            pts = rng.normal(size=(n, 3)) * 10 ** rng.uniform(-3, 3)
        elif kind == 1:
            pts = sample_parametric_shape(("sphere", "torus", "box", "gear")[trial % 4], n, trial).points
        else:
            pts = rng.uniform(-1, 1, size=(n, 3)) + rng.normal(size=3) * 100
        cfg = DenoiserConfig(n_steps=int(rng.integers(1, 5)))
        out, inter = denoise_multistep(pts, init_params(cfg, int(rng.integers(1 << 30))))
        cases += 1
        if not (np.array_equal(out.data, pts) and all(np.array_equal(c.data, pts) for c in inter)):
            bad += 1
    assert verdict(4, "identity at init", bad == 0, f"{cases - bad}/{cases} clouds returned bitwise unchanged")


def test_c05_unsupervised_denoising(verdict):
    runs = toy_runs()
    ratios = {s: sum(r["cd_x1e4"] for r in rows) / sum(r["cd_noisy_x1e4"] for r in rows)
              for s, (_, rows, _) in runs.items()}
    med = statistics.median(ratios.values())
    slowest = max(e for _, _, e in runs.values()) / 60
    ok = med < 0.5 and slowest < 15
    assert verdict(5, "unsupervised denoising", ok,
                   f"median CD(denoised)/CD(noisy) = {med:.3f} (< 0.5), per-seed {fmt(ratios)}, "
                   f"slowest run {slowest:.1f} min (< 15)")


def test_c06_lambda_trend(verdict):
    med = cell_medians(trend_rows()["lambda_dc"])
    vals = [med[v] for v in (0.0, 0.1, 1.0)]
    ok = vals[0] >= vals[1] >= vals[2]
    assert verdict(6, "lambda_dc trend", ok,
                   f"median CD x1e4 {fmt(med)} (non-increasing required), noisy "
                   f"{noisy_median(trend_rows()['lambda_dc']):.3f}")


def test_c07_step_trend(verdict):
    one = cell_medians(trend_rows()["steps"])[1]
    four = cell_medians(trend_rows()["lambda_dc"])[1.0]
    assert verdict(7, "step-count trend", four <= one,
                   f"median CD x1e4 4 steps {four:.3f} <= 1 step {one:.3f}")


def test_c08_loss_metric_ablation(verdict):
    rows = trend_rows()["loss_metric"]
    emd = cell_medians(trend_rows()["lambda_dc"])[1.0]
    cd = cell_medians([r for r in rows if r["value"] == "cd"])["cd"]
    dcd_rows = [r for r in rows if r["value"] == "dcd"]
    broken = 0
    for seed in TREND_SEEDS:
        rs = [r for r in dcd_rows if r["seed"] == seed]
        diverged = any(r["status"] == "diverged" for r in rs)
        worse = np.mean([r["cd_x1e4"] for r in rs]) > np.mean([r["cd_noisy_x1e4"] for r in rs])
        broken += bool(diverged or worse)
    dcd = cell_medians(dcd_rows)["dcd"]
    ok = cd >= 2 * emd and broken > len(TREND_SEEDS) / 2
    assert verdict(8, "loss-metric ablation", ok,
                   f"median CD x1e4 cd {cd:.3f} vs 2 x emd {2 * emd:.3f} (>=); dcd {dcd:.3f} with "
                   f"{broken}/{len(TREND_SEEDS)} seeds diverged or worse than noisy "
                   f"{noisy_median(dcd_rows):.3f} (majority required)")


def test_c09_upsampling(verdict):
    params = toy_runs()[0][0]
    reference = sample_parametric_shape("sphere", 1000, 901).points
    sparse = sample_parametric_shape("sphere", 250, 902).points
    merged = merged_noisy(sparse, 4, 0.02, seed=903)
    dense = upsample(sparse, 4, 0.02, params, seed=903, patch_size=1000)
    cd_merged = chamfer_distance(merged, reference) * 1e4
    cd_dense = chamfer_distance(dense, reference) * 1e4
    ok = len(dense) == 1000 and cd_dense < cd_merged
    assert verdict(9, "upsampling", ok,
                   f"{len(dense)} points (== 1000), CD x1e4 upsampled {cd_dense:.3f} < merged noisy {cd_merged:.3f}")


def test_c10_supervision_firewall(verdict, monkeypatch):
    import noisematch.training as tr

    data = [ObservationSet(o.source_id, o.observations, o.noise_level, None)
            for o in toy_dataset(("sphere", "torus"), 64, 0.02, 3, seed=5)]
    cfg = TrainConfig(epochs=2, patch_size=64).replace(n_steps=1, k_neighbors=8, edgeconv_layers=1,
                                                       feature_width=8, predictor_widths=(8, 3))
    completed = len(train(data, cfg).log) == 2

    with_clean = toy_dataset(("sphere",), 64, 0.02, 3, seed=5)
    real = tr.total_loss

    def leaky(ca, cb, pa, pb, *args, **kw):
        loss_n2c(ca.data, with_clean[0]._clean)
        return real(ca, cb, pa, pb, *args, **kw)

    monkeypatch.setattr(tr, "total_loss", leaky)
    try:
        train(with_clean, cfg)
        caught = False
    except SupervisionLeak:
        caught = True
    ok = completed and caught
    assert verdict(10, "supervision firewall", ok,
                   f"training without clean data completed: {completed}; injected loss_n2c aborted: {caught}")


def test_c11_image_transfer(verdict):
    cards = test_card_suite(3, 256, seed=0)
    results = {}
    for noise in ("gaussian:25", "poisson:25"):
        gains = {0.0: [], 1.0: []}
        for k, clean in enumerate(cards):
            noisy = apply_noise(clean, noise, seed=100 + k)
            base = psnr(noisy, clean)
            for lam in gains:
                den = zs_denoise(noisy, ZsConfig(lambda_dc=lam, seed=k))
                gains[lam].append(psnr(den, clean) - base)
        results[noise] = {lam: statistics.median(g) for lam, g in gains.items()}
    ok = all(r[1.0] >= 3 and r[1.0] >= r[0.0] - 0.2 for r in results.values())
    detail = "; ".join(f"{n}: median gain lambda 0 {r[0.0]:.2f} dB, lambda 1 {r[1.0]:.2f} dB"
                       for n, r in results.items())
    assert verdict(11, "image transfer", ok, detail + " (lambda 1 gain >= 3 dB and >= lambda 0 - 0.2 dB)")


# --- criterion 12 -----------------------------------------------------------------------

TINY_CONFIG = """\
epochs = 3
patch_size = 100
n_steps = 2
k_neighbors = 8
edgeconv_layers = 1
feature_width = 8
predictor_widths = 8,3
"""


def _workflows(root: Path):
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    data = root / "data"
    entry = data / "sphere_n200_s0.02"
    model = root / "train" / "model.ckpt"
    return [
        ["gen-data", "--shapes", "sphere,torus", "--points", "200", "--observations", "3", "--out", str(data)],
        ["train", "--data", str(data), "--config", str(cfg), "--out", str(root / "train")],
        ["denoise", "--in", str(entry / "noisy_0.xyz"), "--model", str(model), "--patch-size", "100",
         "--out", str(root / "denoise")],
        ["upsample", "--in", str(entry / "clean.xyz"), "--model", str(model), "--ratio", "2",
         "--patch-size", "100", "--out", str(root / "upsample")],
        ["eval", "--pred", str(root / "denoise" / "noisy_0_denoised.xyz"), "--clean", str(entry / "clean.xyz"),
         "--mesh", str(entry / "mesh.off"), "--noise-level", "0.02", "--out", str(root / "eval")],
        ["ablate", "--study", "steps", "--data", str(data), "--config", str(cfg), "--seeds", "2",
         "--values", "1,2", "--epochs", "2", "--out", str(root / "ablate")],
        ["image-eval", "--suite", "1", "--crop", "32", "--iterations", "20", "--out", str(root / "image-eval")],
        ["image-denoise", "--in", str(root / "card.pgm"), "--noise", "poisson:25", "--iterations", "20",
         "--out", str(root / "image-denoise")],
    ]


def _snapshot(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        if p.name == "loss_log.csv":
            # wall-clock timing is the one intentionally non-reproducible column
            rows = list(csv.DictReader(p.open()))
            out[str(p.relative_to(root))] = [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
        else:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_c12_cli_determinism(verdict, tmp_path):
    from noisematch.image import test_card
    from noisematch.io import write_pnm

    snaps, codes = [], []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        write_pnm(root / "card.pgm", test_card(32, 3))
        codes.append([main(["--seed", "11", *argv]) for argv in _workflows(root)])
        snaps.append(_snapshot(root))
    a, b = snaps
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = codes[0] == codes[1] == [0] * 8 and not differing
    assert verdict(12, "CLI determinism", ok,
                   f"8 workflows, {len(a)} output files, {len(differing)} differ "
                   f"(loss_log wall_ms column excluded), exit codes {codes[0]}")
