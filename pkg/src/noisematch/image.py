"""Zero-shot single-image denoising with a denoising-consistency term.

The noisy image is split into two half-resolution sub-images by averaging
opposite diagonals of each 2x2 block.  A tiny conv net ``g`` is fit so that
``x - g(x)`` maps either sub-image onto the other; the consistency term
also pulls the two denoised sub-images together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import (
    ImageTooSmall,
    InvalidNoiseLevel,
    NonFiniteValue,
    OddDimensions,
    ShapeError,
    TrainingDiverged,
)

__all__ = [
    "ImageGrid",
    "ZsConfig",
    "as_image",
    "downsample_pair",
    "add_poisson_noise",
    "add_gaussian_image_noise",
    "parse_noise",
    "apply_noise",
    "init_zs_params",
    "zs_residual",
    "zs_loss",
    "zs_denoise",
    "psnr",
    "center_crop",
    "test_card",
    "test_card_suite",
]


@dataclass(frozen=True)
class ImageGrid:
    """Single-channel raster, values nominally in [0, 1]."""

    values: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"ImageGrid needs a 2-D array, got shape {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 2:
            raise ImageTooSmall(f"image must be at least 2x2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue("image contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def as_image(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        return x.values
    return ImageGrid(np.asarray(x, dtype=np.float64)).values


@dataclass(frozen=True)
class ZsConfig:
    iterations: int = 2000
    learning_rate: float = 1e-3
    lambda_dc: float = 1.0
    channels: int = 48
    seed: int = 0
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lambda_dc >= 0:
            raise ValueError("lambda_dc must be >= 0")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


def _pair_arrays(x):
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise OddDimensions(f"downsampling needs even dimensions, got {x.shape[-2:]}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return (a + d) / 2.0, (b + c) / 2.0


def downsample_pair(image) -> tuple[np.ndarray, np.ndarray]:
    """``D1`` = mean of the main diagonal of each 2x2 block, ``D2`` = anti-diagonal."""
    return _pair_arrays(as_image(image))


def add_poisson_noise(image, lambda_level: float, seed: int) -> np.ndarray:
    """``Poisson(lambda * x) / lambda`` clipped to [0, 4]."""
    lam = float(lambda_level)
    if not math.isfinite(lam) or lam <= 0:
        raise InvalidNoiseLevel(f"Poisson level must be positive, got {lambda_level}")
    x = as_image(image)
    if x.min() < 0:
        raise InvalidNoiseLevel("Poisson noise needs non-negative intensities")
    rng = np.random.default_rng(seed)
    return np.clip(rng.poisson(lam * x) / lam, 0.0, 4.0)


def add_gaussian_image_noise(image, sigma: float, seed: int) -> np.ndarray:
    """Additive white Gaussian noise; the result is not clipped."""
    s = float(sigma)
    if not math.isfinite(s) or s < 0:
        raise InvalidNoiseLevel(f"sigma must be finite and >= 0, got {sigma}")
    x = as_image(image)
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, s, size=x.shape)


def parse_noise(text: str) -> tuple[str, float]:
    """``poisson:25`` or ``gaussian:25`` (sigma in 8-bit units) -> (kind, level)."""
    kind, _, level = text.partition(":")
    kind = kind.strip().lower()
    if kind not in ("poisson", "gaussian") or not level:
        raise InvalidNoiseLevel(f"noise must look like poisson:<lambda> or gaussian:<sigma255>, got {text!r}")
    try:
        value = float(level)
    except ValueError:
        raise InvalidNoiseLevel(f"bad noise level in {text!r}") from None
    return kind, value


def apply_noise(image, noise: str, seed: int) -> np.ndarray:
    kind, level = parse_noise(noise)
    if kind == "poisson":
        return add_poisson_noise(image, level, seed)
    return add_gaussian_image_noise(image, level / 255.0, seed)


# --- network ----------------------------------------------------------------------


def init_zs_params(channels: int, seed: int) -> dict:
    """conv3x3(1 -> C), leaky ReLU, conv3x3(C -> 1).

    The output conv starts at zero so the residual denoiser begins as the
    identity.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(9)
    return {
        "conv1.w": rng.uniform(-bound, bound, size=(channels, 1, 3, 3)),
        "conv1.b": np.zeros(channels),
        "conv2.w": np.zeros((1, channels, 3, 3)),
        "conv2.b": np.zeros(1),
    }


def zs_residual(x, params: dict, slope: float = 0.2) -> Tensor:
    """``x - g(x)`` for a batch shaped (B, 1, H, W)."""
    x = ad.as_tensor(x)
    h = ad.leaky_relu(ad.conv2d(x, params["conv1.w"], params["conv1.b"]), slope)
    return x - ad.conv2d(h, params["conv2.w"], params["conv2.b"])


def _mse(a, b) -> Tensor:
    return ad.mean_reduce(ad.square(a - b))


def zs_loss(image, params: dict, lambda_dc: float, slope: float = 0.2):
    """Returns ``(total, n2n, dc)``; the dc term is skipped entirely when lambda_dc == 0."""
    d1, d2 = _pair_arrays(np.asarray(image, dtype=np.float64))
    batch = np.stack([d1, d2])[:, None]
    out = zs_residual(batch, params, slope)
    den1 = ad.gather(out, 0)
    den2 = ad.gather(out, 1)
    n2n = _mse(den1, d2[None]) + _mse(den2, d1[None])
    if lambda_dc == 0:
        return n2n, n2n, None
    dc = _mse(den1, den2)
    return n2n + lambda_dc * dc, n2n, dc


def _fit_channel(x, config: ZsConfig, seed: int, log: list | None):
    params = init_zs_params(config.channels, seed)
    opt = Adam(params, lr=config.learning_rate)
    for it in range(config.iterations):
        tensors = {k: Tensor(v, requires_grad=True) for k, v in opt.params.items()}
        total, n2n, dc = zs_loss(x, tensors, config.lambda_dc, config.leaky_slope)
        value = float(total.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", dict(opt.params), log)
        total.backward()
        opt.step({k: t.grad for k, t in tensors.items() if t.grad is not None})
        if log is not None:
            log.append({"iteration": it, "loss_n2n": float(n2n.data),
                        "loss_dc": float(dc.data) if dc is not None else 0.0, "total": value})
    return opt.params


def zs_denoise(noisy, config: ZsConfig | None = None, return_params: bool = False, log: list | None = None):
    """Fit the zero-shot denoiser to ``noisy`` and apply it at full resolution.

    2-D input is grayscale; an (H, W, C) array is processed one channel at
    a time with independent networks.  Output is clipped to [0, 1].
    """
    config = config or ZsConfig()
    arr = np.asarray(noisy.values if isinstance(noisy, ImageGrid) else noisy, dtype=np.float64)
    if arr.ndim == 3:
        chans = [zs_denoise(arr[..., c], _with_seed(config, config.seed + c), return_params, log)
                 for c in range(arr.shape[2])]
        if return_params:
            return np.stack([c[0] for c in chans], axis=-1), [c[1] for c in chans]
        return np.stack(chans, axis=-1)
    x = as_image(arr)
    _pair_arrays(x)
    params = _fit_channel(x, config, config.seed, log)
    out = zs_residual(x[None, None], {k: Tensor(v) for k, v in params.items()}, config.leaky_slope)
    result = np.clip(out.data[0, 0], 0.0, 1.0)
    return (result, params) if return_params else result


def _with_seed(config: ZsConfig, seed: int) -> ZsConfig:
    return ZsConfig(config.iterations, config.learning_rate, config.lambda_dc, config.channels, seed,
                    config.leaky_slope)


# --- evaluation ---------------------------------------------------------------------


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak SNR in dB; identical inputs give ``inf``."""
    a = np.asarray(a.values if isinstance(a, ImageGrid) else a, dtype=np.float64)
    b = np.asarray(b.values if isinstance(b, ImageGrid) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def center_crop(image, size: int = 256) -> np.ndarray:
    """Central ``size`` x ``size`` window; odd margins leave the extra row/column at the bottom/right."""
    x = np.asarray(image.values if isinstance(image, ImageGrid) else image)
    h, w = x.shape[:2]
    if h < size or w < size:
        raise ImageTooSmall(f"cannot crop {size}x{size} from {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return x[top : top + size, left : left + size].copy()


# --- synthetic test cards ------------------------------------------------------------


def test_card(size: int = 256, seed: int = 0) -> np.ndarray:
    """Deterministic synthetic image: smooth ramps, flat regions, edges, disks and stripes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    angle = rng.uniform(0, np.pi)
    img = 0.25 + 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy) / 1.5
    # flat blocks of random gray
    for _ in range(4):
        x0, y0 = rng.uniform(0, 0.7, size=2)
        w, h = rng.uniform(0.15, 0.3, size=2)
        mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        img[mask] = rng.uniform(0.1, 0.9)
    for _ in range(3):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.06, 0.15)
        img[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = rng.uniform(0.05, 0.95)
    # a low-frequency stripe band
    band = (yy > 0.82) & (yy < 0.95)
    period = rng.uniform(0.05, 0.1)
    img[band] = 0.5 + 0.35 * np.sign(np.sin(2 * np.pi * xx[band] / period))
    return np.clip(img, 0.0, 1.0)


test_card.__test__ = False


def test_card_suite(n: int = 3, size: int = 256, seed: int = 0) -> list:
    return [test_card(size, seed + i) for i in range(n)]


test_card_suite.__test__ = False
