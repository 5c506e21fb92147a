"""Unsupervised training on pairs of noisy observations.

The objective for a sampled pair (Pa, Pb) with denoised outputs (Ca, Cb) is

    EMD(Ca, Pb) + EMD(Cb, Pa) + lambda_dc * EMD(Ca, Cb)

where EMD is the optimal-bijection sum of Euclidean distances.  Matchings
are solved on the current values and held fixed while differentiating.
Clean clouds are never visible to this path: inside :func:`unsupervised`
any access to ``ObservationSet.clean`` or :func:`loss_n2c` raises
:class:`SupervisionLeak`.
"""
from __future__ import annotations

import contextlib
import contextvars
import csv
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import CardinalityMismatch, NeedTwoObservations, NonFiniteValue, SupervisionLeak, TrainingDiverged
from .geometry import as_points, build_knn_index, farthest_point_sample
from .network import DenoiserConfig, DenoiserParams, denoise_multistep, init_params
from .transport import chamfer_distance, emd_exact, nearest_neighbors

__all__ = [
    "ObservationSet",
    "TrainConfig",
    "TrainResult",
    "unsupervised",
    "emd_loss",
    "chamfer_loss",
    "dcd_loss",
    "loss_n2n",
    "loss_dc",
    "loss_n2c",
    "total_loss",
    "sample_observation_pair",
    "aligned_patches",
    "train",
    "read_config",
    "write_loss_log",
]

LOSS_METRICS = ("emd", "cd", "dcd")

_UNSUPERVISED = contextvars.ContextVar("unsupervised", default=False)


@contextlib.contextmanager
def unsupervised():
    """Mark the enclosed code as the unsupervised training path."""
    token = _UNSUPERVISED.set(True)
    try:
        yield
    finally:
        _UNSUPERVISED.reset(token)


def _guard(what: str):
    if _UNSUPERVISED.get():
        raise SupervisionLeak(f"{what} used inside the unsupervised training path")


class ObservationSet:
    """Several independent noisy observations of one underlying shape."""

    def __init__(self, source_id, observations, noise_level=None, clean=None):
        obs = [as_points(o) for o in observations]
        if len(obs) < 2:
            raise NeedTwoObservations(f"{source_id}: need at least 2 observations, got {len(obs)}")
        if len({len(o) for o in obs}) != 1:
            raise CardinalityMismatch(f"{source_id}: observations differ in size")
        self.source_id = source_id
        self.observations = obs
        self.noise_level = noise_level
        self._clean = None if clean is None else as_points(clean)

    @property
    def clean(self):
        _guard("ObservationSet.clean")
        return self._clean

    def without_clean(self) -> "ObservationSet":
        return ObservationSet(self.source_id, self.observations, self.noise_level, None)

    def __len__(self):
        return len(self.observations)

    def __repr__(self):
        return (
            f"ObservationSet({self.source_id!r}, {len(self.observations)} x "
            f"{len(self.observations[0])} points, noise={self.noise_level})"
        )


# --- losses ------------------------------------------------------------------


def _check_sizes(*clouds):
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) != 1:
        raise CardinalityMismatch(f"loss needs equal-size clouds, got sizes {sorted(sizes)}")


def emd_loss(x, y) -> Tensor:
    """EMD(x, y) as a graph node: sum of ||x_i - y_phi(i)|| with phi held fixed."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    _check_sizes(x, y)
    phi = emd_exact(x.data, y.data).assignment
    return ad.sum_reduce(ad.row_norm(x - ad.gather(y, phi)))


def chamfer_loss(x, y) -> Tensor:
    """Summed squared nearest-neighbor distances in both directions."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    _, i_xy = nearest_neighbors(x.data, y.data)
    _, i_yx = nearest_neighbors(y.data, x.data)
    fwd = ad.sum_reduce(ad.square(x - ad.gather(y, i_xy)))
    bwd = ad.sum_reduce(ad.square(y - ad.gather(x, i_yx)))
    return fwd + bwd


def dcd_loss(x, y, alpha=1000.0) -> Tensor:
    """Density-aware Chamfer distance, summed over points.

    Each point contributes ``1 - exp(-alpha * d^2) / n_hat`` where ``d`` is
    the distance to its nearest neighbor in the other set and ``n_hat`` the
    number of points sharing that neighbor; the two directions are averaged.
    """
    x, y = ad.as_tensor(x), ad.as_tensor(y)

    def one_way(a, b):
        _, idx = nearest_neighbors(a.data, b.data)
        count = np.bincount(idx, minlength=b.shape[0]).astype(np.float64)
        d2 = ad.sum_reduce(ad.square(a - ad.gather(b, idx)), axis=1)
        return ad.sum_reduce(1.0 - ad.exp(-alpha * d2) * (1.0 / count[idx]))

    return 0.5 * (one_way(x, y) + one_way(y, x))


def _distance(metric: str, dcd_alpha: float = 1000.0):
    if metric == "emd":
        return emd_loss
    if metric == "cd":
        return chamfer_loss
    if metric == "dcd":
        return lambda a, b: dcd_loss(a, b, dcd_alpha)
    raise ValueError(f"unknown loss metric {metric!r}; choose from {LOSS_METRICS}")


def loss_n2n(Ca, Cb, Pa, Pb, metric="emd", dcd_alpha=1000.0) -> Tensor:
    """D(Ca, Pb) + D(Cb, Pa): each prediction is matched to the other observation."""
    Ca, Cb, Pa, Pb = (ad.as_tensor(t) for t in (Ca, Cb, Pa, Pb))
    _check_sizes(Ca, Cb, Pa, Pb)
    dist = _distance(metric, dcd_alpha)
    return dist(Ca, Pb) + dist(Cb, Pa)


def loss_dc(Ca, Cb, metric="emd", dcd_alpha=1000.0) -> Tensor:
    """D(Ca, Cb) between the two predictions; gradients reach both."""
    Ca, Cb = ad.as_tensor(Ca), ad.as_tensor(Cb)
    _check_sizes(Ca, Cb)
    return _distance(metric, dcd_alpha)(Ca, Cb)


def loss_n2c(C, G) -> float:
    """Supervised noise-to-clean Chamfer loss, for baselines and evaluation only."""
    _guard("loss_n2c")
    C = C.data if isinstance(C, Tensor) else C
    return chamfer_distance(C, G)


def total_loss(Ca, Cb, Pa, Pb, lambda_dc=1.0, metric="emd", dc_metric="emd", dcd_alpha=1000.0):
    """Returns ``(total, n2n, dc)``; with ``lambda_dc == 0`` total is n2n itself."""
    n2n = loss_n2n(Ca, Cb, Pa, Pb, metric, dcd_alpha)
    if lambda_dc == 0:
        return n2n, n2n, None
    dc = loss_dc(Ca, Cb, dc_metric, dcd_alpha)
    return n2n + float(lambda_dc) * dc, n2n, dc


def sample_observation_pair(obs: ObservationSet, rng: np.random.Generator):
    """Two distinct observations chosen uniformly without replacement."""
    if len(obs.observations) < 2:
        raise NeedTwoObservations(f"{obs.source_id}: need at least 2 observations")
    i, j = rng.choice(len(obs.observations), size=2, replace=False)
    return obs.observations[i], obs.observations[j]


def aligned_patches(pa, pb, patch_size, n_patches, rng):
    """Patch pairs cut around the same locations in both observations.

    Seed locations are farthest-point samples of ``pa``; each patch is the
    ``patch_size`` nearest points to the seed location in either cloud.
    Both patches of a pair share one normalization (mean centroid, larger
    radius) so they live in the same frame.
    """
    n = len(pa)
    if patch_size >= n:
        pairs = [(pa, pb)]
    else:
        seeds = farthest_point_sample(pa, min(n_patches, n), seed=int(rng.integers(2**31)))
        ia, ib = build_knn_index(pa), build_knn_index(pb)
        pairs = [(pa[ia.query_point(pa[s], patch_size)], pb[ib.query_point(pa[s], patch_size)]) for s in seeds]
    out = []
    for qa, qb in pairs:
        center = 0.5 * (qa.mean(axis=0) + qb.mean(axis=0))
        scale = max(
            np.sqrt(((qa - center) ** 2).sum(axis=1).max()),
            np.sqrt(((qb - center) ** 2).sum(axis=1).max()),
        )
        scale = scale if scale > 0 else 1.0
        out.append(((qa - center) / scale, (qb - center) / scale))
    return out


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    patches_per_shape: int = 1
    patch_size: int = 1000
    lambda_dc: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_metric: str = "emd"
    dc_metric: str = "emd"
    dcd_alpha: float = 1000.0
    per_step_loss: bool = False
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if self.lambda_dc < 0:
            raise ValueError("lambda_dc must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patch_size < self.denoiser.k_neighbors + 1:
            raise ValueError("patch_size must exceed k_neighbors")
        if self.loss_metric not in LOSS_METRICS or self.dc_metric not in LOSS_METRICS:
            raise ValueError(f"loss metrics must be one of {LOSS_METRICS}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from flat ``key -> value`` pairs (strings are converted)."""
        own = {f.name: f for f in fields(cls) if f.name != "denoiser"}
        net = {f.name: f for f in fields(DenoiserConfig)}
        kw, netkw = {}, {}
        for key, raw in values.items():
            if key in own:
                kw[key] = _convert(raw, own[key].type, cls.__dataclass_fields__[key].default)
            elif key in net:
                netkw[key] = _convert(raw, net[key].type, DenoiserConfig.__dataclass_fields__[key].default)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(denoiser=DenoiserConfig(**netkw), **kw)

    def to_mapping(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "denoiser"}
        out.update(self.denoiser.to_dict())
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_mapping().items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        net = {k: changes.pop(k) for k in list(changes) if k in DenoiserConfig.__dataclass_fields__}
        cfg = replace(self, **changes)
        if net:
            cfg = replace(cfg, denoiser=replace(cfg.denoiser, **net))
        return cfg


def _convert(raw, annotation, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config(path) -> dict:
    """Parse a UTF-8 ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# --- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: DenoiserParams
    log: list


def _pair_losses(tensors, qa, qb, config: TrainConfig):
    net = config.denoiser
    with np.errstate(over="ignore", invalid="ignore"):
        ca, inter_a = denoise_multistep(qa, tensors, net)
        cb, inter_b = denoise_multistep(qb, tensors, net)
    # the matching solvers cannot handle inf/nan coordinates
    if not all(np.all(np.isfinite(c.data)) for c in (*inter_a, *inter_b)):
        raise NonFiniteValue("denoiser produced non-finite points")
    if config.per_step_loss:
        outs = list(zip(inter_a, inter_b))
    else:
        outs = [(ca, cb)]
    total = n2n = dc = None
    for xa, xb in outs:
        t, a, d = total_loss(
            xa, xb, qa, qb, config.lambda_dc, config.loss_metric, config.dc_metric, config.dcd_alpha
        )
        total = t if total is None else total + t
        n2n = a if n2n is None else n2n + a
        if d is not None:
            dc = d if dc is None else dc + d
    return total, n2n, dc


def train(dataset, config: TrainConfig, init: DenoiserParams | None = None, step_hook=None) -> TrainResult:
    """Fit a denoiser on noisy observations only.

    Every epoch visits the shapes in order; for each shape a random pair of
    observations is drawn, aligned patches are cut, both patches are
    denoised, and one Adam step is taken on the mean patch loss.  Raises
    :class:`TrainingDiverged` (carrying the last finite parameters) as
    soon as a loss or gradient is non-finite.
    """
    dataset = list(dataset)
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(config.denoiser, config.seed)
    opt = Adam(params.arrays, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    log = []
    with unsupervised():
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            sums = np.zeros(3)
            for obs in dataset:
                pa, pb = sample_observation_pair(obs, rng)
                pairs = aligned_patches(pa, pb, config.patch_size, config.patches_per_shape, rng)
                tensors = {k: Tensor(v, requires_grad=True) for k, v in opt.params.items()}
                total = n2n_sum = dc_sum = 0.0
                loss = None
                last_good = DenoiserParams(config.denoiser, dict(opt.params))
                for qa, qb in pairs:
                    try:
                        t, a, d = _pair_losses(tensors, qa, qb, config)
                    except NonFiniteValue:
                        raise TrainingDiverged(
                            f"non-finite prediction at epoch {epoch} on {obs.source_id}", last_good, log
                        ) from None
                    loss = t if loss is None else loss + t
                    n2n_sum += float(a.data)
                    dc_sum += float(d.data) if d is not None else 0.0
                loss = loss * (1.0 / len(pairs))
                total = float(loss.data)
                if not math.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} on {obs.source_id}", last_good, log
                    )
                loss.backward()
                grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDiverged(
                        f"non-finite gradient at epoch {epoch} on {obs.source_id}", last_good, log
                    )
                opt.step(grads)
                if any(not np.all(np.isfinite(p)) for p in opt.params.values()):
                    raise TrainingDiverged(f"non-finite parameters at epoch {epoch}", last_good, log)
                sums += (n2n_sum / len(pairs), dc_sum / len(pairs), total)
            k = max(len(dataset), 1)
            row = {
                "epoch": epoch,
                "loss_n2n": sums[0] / k,
                "loss_dc": sums[1] / k,
                "total": sums[2] / k,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            log.append(row)
            if step_hook is not None:
                step_hook(row)
    return TrainResult(DenoiserParams(config.denoiser, dict(opt.params)), log)


LOG_FIELDS = ("epoch", "loss_n2n", "loss_dc", "total", "wall_ms")


def write_loss_log(path, log) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in log:
            w.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in LOG_FIELDS})
