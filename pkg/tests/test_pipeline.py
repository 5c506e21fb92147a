import json
import math
import warnings

import numpy as np
import pytest

from noisematch.errors import DataError, InvalidNoiseLevel, NoReference
from noisematch.geometry import bounding_sphere_radius
from noisematch.io import read_xyz
from noisematch.network import DenoiserConfig, init_params
from noisematch.pipeline import (
    ExperimentSpec,
    SinglePatchFallback,
    ablate,
    cell_medians,
    denoise_cloud,
    evaluate,
    gen_data,
    load_dataset,
    merged_noisy,
    summarize,
    toy_dataset,
    upsample,
    write_csv,
)
from noisematch.training import TrainConfig
from noisematch.transport import TriangleMesh, chamfer_distance, point_to_mesh

SMALL = DenoiserConfig(n_steps=2, k_neighbors=8, edgeconv_layers=1, feature_width=8, predictor_widths=(8, 3))


def perturbed(params, seed=0, scale=0.05):
    out = params.copy()
    rng = np.random.default_rng(seed)
    for k, v in out.arrays.items():
        out.arrays[k] = v + scale * rng.normal(size=v.shape)
    return out


def test_gen_data_layout(tmp_path):
    spec = ExperimentSpec(shapes=("sphere",), n_points=(200,), noise_levels=(0.02,), n_observations=3)
    manifest = gen_data(tmp_path, spec)
    entry = manifest["entries"][0]
    d = tmp_path / entry["id"]
    assert sorted(p.name for p in d.iterdir()) == ["clean.xyz", "mesh.off", "noisy_0.xyz",
                                                   "noisy_1.xyz", "noisy_2.xyz"]
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    assert len(set(entry["noise_seeds"])) == 3
    for k in range(3):
        assert read_xyz(d / f"noisy_{k}.xyz").shape == (200, 3)


def test_gen_data_bit_identical(tmp_path):
    spec = ExperimentSpec(shapes=("torus", "gear"), n_points=(100,), noise_levels=(0.01, 0.03))
    gen_data(tmp_path / "a", spec)
    gen_data(tmp_path / "b", spec)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 1 + 4 * 6
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_noise_moment(tmp_path):
    sigma = 0.02
    gen_data(tmp_path, ExperimentSpec(shapes=("sphere",), n_points=(5000,), noise_levels=(sigma,),
                                      n_observations=2))
    d = next(p for p in tmp_path.iterdir() if p.is_dir())
    clean = read_xyz(d / "clean.xyz")
    noise = read_xyz(d / "noisy_0.xyz") - clean
    expected = sigma * bounding_sphere_radius(clean)
    # per-coordinate std with a chi-square based 4-sigma band
    assert abs(noise.std() / expected - 1) < 4 / math.sqrt(2 * noise.size)


def test_spec_validation():
    with pytest.raises(InvalidNoiseLevel):
        ExperimentSpec(noise_levels=(0.3,))
    with pytest.raises(DataError):
        ExperimentSpec(n_observations=1)


def test_load_dataset_hides_clean(tmp_path):
    gen_data(tmp_path, ExperimentSpec(shapes=("sphere",), n_points=(50,)))
    (obs,) = load_dataset(tmp_path)
    assert obs.clean is None and len(obs.observations) == 4
    (obs,) = load_dataset(tmp_path, with_clean=True)
    assert obs.clean.shape == (50, 3)


def test_zero_init_denoise_is_identity():
    pts = toy_dataset(("sphere",), 600, 0.02)[0].observations[0]
    params = init_params(SMALL, 0)
    out = denoise_cloud(pts, params, patch_size=200)
    assert np.allclose(out, pts, atol=1e-12)


def test_stitch_every_point_exactly_once():
    """A non-trivial net moves each point by its owning patch; no point is lost or duplicated."""
    pts = toy_dataset(("torus",), 700, 0.02)[0].observations[0]
    out = denoise_cloud(pts, perturbed(init_params(SMALL, 0)), patch_size=150, seed=1)
    assert out.shape == pts.shape and np.all(np.isfinite(out))
    moved = np.linalg.norm(out - pts, axis=1)
    assert np.all(moved < 0.5)
    assert np.mean(moved > 0) > 0.99


def test_fallback_warning():
    pts = toy_dataset(("sphere",), 100, 0.02)[0].observations[0]
    with pytest.warns(SinglePatchFallback):
        out = denoise_cloud(pts, init_params(SMALL, 0), patch_size=200)
    assert np.allclose(out, pts, atol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        denoise_cloud(pts, init_params(SMALL, 0), patch_size=100)


def test_upsample_cardinality_and_small_sigma():
    sparse = toy_dataset(("sphere",), 120, 0.02)[0].clean
    params = init_params(SMALL, 0)
    with pytest.warns(SinglePatchFallback):
        out = upsample(sparse, 3, 1e-9, params, patch_size=1000)
    assert out.shape == (360, 3)
    # identity net + vanishing noise: three stacked copies of the input
    for k in range(3):
        assert np.allclose(out[k * 120:(k + 1) * 120], sparse, atol=1e-7)
    assert merged_noisy(sparse, 4, 0.02).shape == (480, 3)
    with pytest.raises(DataError):
        upsample(sparse, 1, 0.02, params)


def test_evaluate_delegates_to_metrics():
    obs = toy_dataset(("sphere",), 300, 0.02)[0]
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
    rows = evaluate({"a": obs.observations[0], "b": obs.observations[1]}, obs.clean, 0.02, mesh)
    for r, pred in zip(rows, obs.observations[:2]):
        assert r["cd_x1e4"] == pytest.approx(chamfer_distance(pred, obs.clean) * 1e4, abs=1e-12)
        assert r["p2m_x1e4"] == pytest.approx(point_to_mesh(pred, mesh) * 1e4, abs=1e-12)
    (s,) = summarize(rows)
    assert s["count"] == 2 and s["cd_x1e4"] == pytest.approx(np.mean([r["cd_x1e4"] for r in rows]))
    with pytest.raises(NoReference):
        evaluate({"a": obs.observations[0]}, None)


def test_write_csv_roundtrips_floats(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": "x"}]
    write_csv(tmp_path / "r.csv", rows)
    assert float((tmp_path / "r.csv").read_text().splitlines()[1].split(",")[0]) == 0.1 + 0.2


def test_ablate_small_and_medians():
    data = toy_dataset(("sphere",), 60, 0.03, n_observations=2)
    base = TrainConfig(epochs=1, patch_size=60).replace(n_steps=1, k_neighbors=4, edgeconv_layers=1,
                                                       feature_width=4, predictor_widths=(4, 3))
    rows = ablate("steps", data, base, seeds=(0, 1), values=(1, 2))
    assert len(rows) == 4 and {r["status"] for r in rows} == {"ok"}
    med = cell_medians(rows)
    assert set(med) == {1, 2} and all(math.isfinite(v) for v in med.values())
    with pytest.raises(DataError):
        ablate("width", data, base)


def test_cell_medians_example():
    rows = [{"value": 0, "seed": s, "cd_x1e4": v} for s, v in enumerate([1.0, 5.0, 3.0])]
    rows.append({"value": 1, "seed": 0, "cd_x1e4": math.inf})
    assert cell_medians(rows) == {0: 3.0, 1: math.inf}
