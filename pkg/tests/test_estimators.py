import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from noisematch.errors import DataError, NonFiniteValue
from noisematch.estimators import (
    PointCloudDenoiser,
    ZeroShotImageDenoiser,
    check_observations,
    check_point_cloud,
)
from noisematch.image import test_card
from noisematch.pipeline import SinglePatchFallback, toy_dataset


def test_check_point_cloud():
    assert check_point_cloud([[0, 0, 1]]).dtype == np.float64
    with pytest.raises(DataError):
        check_point_cloud(np.zeros((4, 2)))
    with pytest.raises(DataError):
        check_point_cloud(np.zeros((2, 3)), min_points=3)
    with pytest.raises(NonFiniteValue):
        check_point_cloud([[0, np.inf, 0]])


def test_check_observations_drops_clean():
    data = toy_dataset(("sphere",), 50)
    (obs,) = check_observations(data)
    assert obs.clean is None
    (raw,) = check_observations([np.zeros((2, 5, 3))])
    assert len(raw.observations) == 2
    with pytest.raises(DataError):
        check_observations([])


def test_params_and_clone():
    est = PointCloudDenoiser(n_steps=2, lambda_dc=0.1)
    assert est.get_params()["lambda_dc"] == 0.1
    c = clone(est).set_params(epochs=3)
    assert c.epochs == 3 and est.epochs == 200


def test_transform_requires_fit():
    with pytest.raises(NotFittedError):
        PointCloudDenoiser().transform(np.zeros((20, 3)))


def test_identity_transform():
    pts = toy_dataset(("sphere",), 300)[0].observations[0]
    est = PointCloudDenoiser(n_steps=1, k_neighbors=8, patch_size=300).identity()
    assert np.allclose(est.transform(pts), pts, atol=1e-12)
    with pytest.warns(SinglePatchFallback):
        outs = est.transform([pts, pts[:200]])
    assert len(outs) == 2 and outs[1].shape == (200, 3)


def test_fit_transform_smoke():
    data = toy_dataset(("sphere",), 80, 0.03, n_observations=2)
    est = PointCloudDenoiser(n_steps=1, k_neighbors=4, epochs=2, patch_size=80, random_state=1)
    est.fit([o.observations for o in data])
    assert len(est.loss_log_) == 2
    out = est.transform(data[0].observations[0])
    assert out.shape == (80, 3) and np.all(np.isfinite(out))
    assert est.upsample(data[0].observations[0][:40], ratio=2).shape == (80, 3)


def test_image_estimator():
    est = ZeroShotImageDenoiser(iterations=2, channels=2)
    assert clone(est).get_params() == est.get_params()
    out = est.fit_transform(test_card(16, 0))
    assert out.shape == (16, 16)
    assert len(est.transform([test_card(8, 0), test_card(8, 1)])) == 2
