"""scikit-learn style wrappers around training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DataError, NonFiniteValue
from .image import ZsConfig, zs_denoise
from .network import DenoiserParams, init_params
from .pipeline import denoise_cloud, upsample
from .training import ObservationSet, TrainConfig, train

__all__ = ["check_point_cloud", "check_observations", "PointCloudDenoiser", "ZeroShotImageDenoiser"]


def check_point_cloud(X, min_points=1) -> np.ndarray:
    """Return ``X`` as a float64 (n, 3) array or raise DataError."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected an (n, 3) array, got shape {arr.shape}")
    if len(arr) < min_points:
        raise DataError(f"expected at least {min_points} points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("point cloud contains NaN or Inf")
    return arr


def check_observations(X) -> list:
    """Accept ObservationSets, or a list of (k, n, 3) arrays / lists of clouds."""
    if isinstance(X, ObservationSet):
        X = [X]
    out = []
    for i, item in enumerate(X):
        if isinstance(item, ObservationSet):
            out.append(item.without_clean())
        else:
            clouds = [check_point_cloud(c) for c in item]
            out.append(ObservationSet(f"shape{i}", clouds))
    if not out:
        raise DataError("no training shapes given")
    return out


class PointCloudDenoiser(TransformerMixin, BaseEstimator):
    """Learn a multi-step point denoiser from noisy observation pairs.

    ``fit`` takes a list whose items each hold two or more noisy copies of
    one shape; clean data is never needed (and is dropped if present).
    ``transform`` denoises a single (n, 3) cloud or a list of them.

    Parameters mirror :class:`TrainConfig` plus the network sizes.
    """

    def __init__(self, n_steps=4, k_neighbors=16, epochs=200, patch_size=1000,
                 lambda_dc=1.0, learning_rate=1e-3, loss_metric="emd", noise_level=0.02,
                 random_state=0):
        self.n_steps = n_steps
        self.k_neighbors = k_neighbors
        self.epochs = epochs
        self.patch_size = patch_size
        self.lambda_dc = lambda_dc
        self.learning_rate = learning_rate
        self.loss_metric = loss_metric
        self.noise_level = noise_level
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, patch_size=self.patch_size, lambda_dc=self.lambda_dc,
            learning_rate=self.learning_rate, loss_metric=self.loss_metric,
            seed=int(self.random_state or 0),
        ).replace(n_steps=self.n_steps, k_neighbors=self.k_neighbors)

    def fit(self, X, y=None):
        data = check_observations(X)
        cfg = self._config()
        result = train(data, cfg)
        self.params_ = result.params
        self.loss_log_ = result.log
        self.n_shapes_ = len(data)
        return self

    def _check_fitted(self) -> DenoiserParams:
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() first, or use identity() for an untrained model")
        return self.params_

    def identity(self):
        """Attach freshly initialised (identity) parameters without training."""
        self.params_ = init_params(self._config().denoiser, int(self.random_state or 0))
        self.loss_log_ = []
        return self

    def transform(self, X):
        params = self._check_fitted()
        if isinstance(X, (list, tuple)) and X and np.ndim(X[0]) == 2:
            return [self.transform(x) for x in X]
        pts = check_point_cloud(X, min_points=self.k_neighbors + 1)
        return denoise_cloud(pts, params, self.patch_size, int(self.random_state or 0))

    def upsample(self, X, ratio=4, noise_level=None):
        params = self._check_fitted()
        pts = check_point_cloud(X)
        sigma = self.noise_level if noise_level is None else noise_level
        return upsample(pts, ratio, sigma, params, int(self.random_state or 0), self.patch_size)


class ZeroShotImageDenoiser(TransformerMixin, BaseEstimator):
    """Per-image denoiser: ``fit_transform`` fits a fresh net to each image."""

    def __init__(self, iterations=2000, learning_rate=1e-3, lambda_dc=1.0, channels=48,
                 random_state=0):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.lambda_dc = lambda_dc
        self.channels = channels
        self.random_state = random_state

    def _config(self):
        return ZsConfig(self.iterations, self.learning_rate, self.lambda_dc, self.channels,
                        int(self.random_state or 0))

    def fit(self, X, y=None):
        # nothing is shared between images; fitting happens in transform
        self.config_ = self._config()
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self._config()
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3 and not isinstance(X, list)):
            return zs_denoise(arr, cfg)
        return [zs_denoise(np.asarray(x, dtype=np.float64), cfg) for x in X]
