"""Multi-step residual point denoiser built from dynamic EdgeConv layers.

Each step ``f_i`` rebuilds a kNN graph on the current coordinates, runs a
stack of EdgeConv layers with residual connections, and predicts a
per-point displacement with a small MLP.  Steps are applied in sequence:
``C^i = C^{i-1} + f_i(C^{i-1})`` starting from the noisy input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteValue, PatchTooSmall, ShapeError
from .geometry import knn_graph

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "init_params",
    "edgeconv_forward",
    "predict_path",
    "denoise_step",
    "denoise_multistep",
]


@dataclass(frozen=True)
class DenoiserConfig:
    n_steps: int = 4
    k_neighbors: int = 16
    edgeconv_layers: int = 3
    feature_width: int = 64
    predictor_widths: tuple = (128, 64, 3)
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "predictor_widths", tuple(int(w) for w in self.predictor_widths))
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.edgeconv_layers < 1:
            raise ValueError("edgeconv_layers must be >= 1")
        if not self.predictor_widths or self.predictor_widths[-1] != 3:
            raise ValueError("the last predictor width must be 3")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenoiserParams:
    """Named parameter arrays for ``n_steps`` independent step networks."""

    config: DenoiserConfig
    arrays: dict = field(default_factory=dict)

    def tensors(self, requires_grad=False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def n_steps(self) -> int:
        return self.config.n_steps


def _layer_shapes(config: DenoiserConfig):
    """Ordered (name, shape, kind) for one step; kind is 'hidden', 'bias' or 'final'."""
    shapes = []
    width_in = 3
    for layer in range(config.edgeconv_layers):
        out = config.feature_width
        shapes.append((f"ec{layer}.w", (2 * width_in, out), "hidden"))
        shapes.append((f"ec{layer}.b", (out,), "bias"))
        if width_in != out:
            shapes.append((f"ec{layer}.proj", (width_in, out), "hidden"))
        width_in = out
    widths = config.predictor_widths
    for j, out in enumerate(widths):
        last = j == len(widths) - 1
        shapes.append((f"pred{j}.w", (width_in, out), "final" if last else "hidden"))
        shapes.append((f"pred{j}.b", (out,), "final" if last else "bias"))
        width_in = out
    return shapes


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases.

    The last predictor layer of every step is all zeros, so a fresh model
    is exactly the identity map.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for s in range(config.n_steps):
        for name, shape, kind in _layer_shapes(config):
            if kind == "hidden":
                bound = 1.0 / np.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            else:
                arr = np.zeros(shape)
            arrays[f"step{s}.{name}"] = arr
    return DenoiserParams(config, arrays)


def edgeconv_forward(features, neighbors, layer: dict, slope: float = 0.2) -> Tensor:
    """One EdgeConv layer with a residual connection.

    Edge feature ``[f_i, f_j - f_i]`` goes through the shared linear map
    ``w`` (rows: first half acts on ``f_i``, second half on ``f_j - f_i``),
    a leaky ReLU, and a max over the k neighbors.  Because the activation is
    monotone, ``max_j act(e_ij) == act(max_j e_ij)`` and only the
    neighbor-dependent part ``f_j @ w_edge`` needs the per-edge max.
    """
    f = ad.as_tensor(features)
    nbr = np.asarray(neighbors, dtype=np.intp)
    w, b = layer["w"], layer["b"]
    width = f.shape[1]
    if w.shape[0] != 2 * width or nbr.ndim != 2 or nbr.shape[0] != f.shape[0]:
        raise ShapeError(
            f"edgeconv: features {f.shape}, neighbors {nbr.shape}, weight {w.shape} do not agree"
        )
    w_center = ad.gather(w, np.arange(width))
    w_edge = ad.gather(w, np.arange(width, 2 * width))
    center = f @ (w_center - w_edge)
    edge = f @ w_edge
    pooled = ad.max_reduce(ad.gather(edge, nbr), axis=1)
    h = ad.leaky_relu(center + pooled + b, slope)
    if "proj" in layer:
        return h + f @ layer["proj"]
    if h.shape != f.shape:
        raise ShapeError(f"edgeconv: residual needs matching widths, got {f.shape} -> {h.shape}")
    return h + f


def predict_path(features, layers: list, slope: float = 0.2) -> Tensor:
    """MLP head: leaky ReLU between layers, linear output of width 3."""
    h = ad.as_tensor(features)
    for j, (w, b) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"predict_path: layer {j} expects width {w.shape[0]}, got {h.shape[-1]}")
        h = h @ w + b
        if j < len(layers) - 1:
            h = ad.leaky_relu(h, slope)
    return h


def _step_tensors(params, step: int) -> dict:
    prefix = f"step{step}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def denoise_step(points, step_params: dict, config: DenoiserConfig) -> Tensor:
    """One step: rebuild kNN on the current coordinates, add the predicted move."""
    x = ad.as_tensor(points)
    n = x.shape[0]
    if n <= config.k_neighbors:
        raise PatchTooSmall(f"need more than k={config.k_neighbors} points, got {n}")
    step_params = {k: ad.as_tensor(v) for k, v in step_params.items()}
    nbr = knn_graph(x.data, config.k_neighbors)
    f = x
    for layer in range(config.edgeconv_layers):
        prefix = f"ec{layer}."
        lp = {k[len(prefix):]: v for k, v in step_params.items() if k.startswith(prefix)}
        f = edgeconv_forward(f, nbr, lp, config.leaky_slope)
    head = [
        (step_params[f"pred{j}.w"], step_params[f"pred{j}.b"])
        for j in range(len(config.predictor_widths))
    ]
    return x + predict_path(f, head, config.leaky_slope)


def denoise_multistep(points, params, config: DenoiserConfig | None = None):
    """Apply all steps in order; returns ``(final, [C^1, ..., C^N])``.

    ``params`` is a :class:`DenoiserParams` or a dict of arrays/tensors
    keyed like ``DenoiserParams.arrays``.
    """
    if isinstance(params, DenoiserParams):
        config = params.config if config is None else config
        params = params.arrays
    if config is None:
        raise ValueError("config is required when params is a plain dict")
    cur = ad.as_tensor(points)
    intermediates = []
    for s in range(config.n_steps):
        cur = denoise_step(cur, _step_tensors(params, s), config)
        if not np.all(np.isfinite(cur.data)):
            raise NonFiniteValue(f"denoise step {s} produced non-finite points")
        intermediates.append(cur)
    return cur, intermediates
