"""Point-cloud containers, neighbor search, sampling, patching and synthetic shapes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptyCloud,
    InvalidNoiseLevel,
    KTooLarge,
    NonFiniteValue,
    PatchTooLarge,
    SampleTooLarge,
    UnknownShape,
)

__all__ = [
    "Label",
    "PointCloud",
    "NeighborIndex",
    "NormalizationTransform",
    "Patch",
    "as_points",
    "bounding_sphere_radius",
    "add_gaussian_noise",
    "build_knn_index",
    "k_nearest",
    "knn_graph",
    "farthest_point_sample",
    "extract_patches",
    "normalize_patch",
    "denormalize",
    "sample_parametric_shape",
    "parametric_mesh",
    "SHAPES",
]

SHAPES = ("sphere", "torus", "box", "gear")

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.3
BOX_EXTENT = (2.0, 1.2, 0.8)
GEAR_TEETH = 12
GEAR_OUTER = 1.0
GEAR_INNER = 0.8
GEAR_HEIGHT = 0.4


class Label(str, Enum):
    clean = "clean"
    noisy = "noisy"
    denoised = "denoised"
    intermediate = "intermediate"


@dataclass
class PointCloud:
    """An (n, 3) array of positions with provenance."""

    points: np.ndarray
    label: Label = Label.clean
    source_id: str | None = None

    def __post_init__(self):
        self.points = as_points(self.points)
        self.label = Label(self.label)

    def __len__(self):
        return len(self.points)

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def with_points(self, points, label=None) -> "PointCloud":
        return PointCloud(points, self.label if label is None else label, self.source_id)


def as_points(x, allow_empty=False) -> np.ndarray:
    """Validate ``x`` as a finite float64 array of shape (n, 3)."""
    if isinstance(x, PointCloud):
        x = x.points
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.size == 0:
        if allow_empty:
            return pts.reshape(0, 3)
        raise EmptyCloud("point cloud is empty")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise NonFiniteValue("point coordinates must be finite")
    return pts


def bounding_sphere_radius(cloud) -> float:
    """Max distance from the centroid (centroid-centred bounding sphere)."""
    pts = as_points(cloud)
    center = pts.mean(axis=0)
    return float(np.sqrt(((pts - center) ** 2).sum(axis=1).max()))


def add_gaussian_noise(cloud, sigma_fraction: float, seed: int) -> PointCloud:
    """Perturb every coordinate with N(0, sigma^2), sigma = sigma_fraction * radius."""
    src = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    sigma_fraction = float(sigma_fraction)
    if not math.isfinite(sigma_fraction) or not 0.0 < sigma_fraction <= 0.2:
        raise InvalidNoiseLevel(f"sigma_fraction must lie in (0, 0.2], got {sigma_fraction}")
    sigma = sigma_fraction * bounding_sphere_radius(src)
    rng = np.random.default_rng(seed)
    noisy = src.points + rng.normal(scale=sigma, size=src.points.shape)
    return src.with_points(noisy, Label.noisy)


@dataclass(frozen=True)
class NeighborIndex:
    """Immutable exact kNN structure over a snapshot of points.

    Neighbors are ordered by squared Euclidean distance, ties broken by the
    smaller index, and never include the query point itself.
    """

    points: np.ndarray
    tree: cKDTree = field(repr=False)

    @property
    def k_max(self) -> int:
        return len(self.points) - 1

    def query(self, query_indices, k: int) -> np.ndarray:
        """Neighbor indices of shape (len(query_indices), k)."""
        n = len(self.points)
        if k < 1 or k >= n:
            raise KTooLarge(f"k must satisfy 1 <= k < n={n}, got {k}")
        qi = np.atleast_1d(np.asarray(query_indices, dtype=np.intp))
        out = np.empty((len(qi), k), dtype=np.intp)
        todo = np.arange(len(qi))
        fetch = min(n, k + 4)
        while len(todo):
            _, cand = self.tree.query(self.points[qi[todo]], k=fetch)
            cand = np.asarray(cand).reshape(len(todo), fetch)
            retry = []
            for row, r in enumerate(todo):
                i = qi[r]
                c = cand[row][cand[row] != i]
                d = ((self.points[c] - self.points[i]) ** 2).sum(axis=1)
                order = np.lexsort((c, d))
                c, d = c[order], d[order]
                # every point tied with the k-th distance must be among the candidates
                if fetch < n and d[-1] <= d[k - 1] * (1 + 1e-9) + 1e-300:
                    retry.append(r)
                    continue
                out[r] = c[:k]
            todo = np.asarray(retry, dtype=np.intp)
            fetch = min(n, 2 * fetch)
        return out

    def query_point(self, x, k: int) -> np.ndarray:
        """The k points nearest to an arbitrary location ``x`` (self included if present)."""
        n = len(self.points)
        if k < 1 or k > n:
            raise KTooLarge(f"k must satisfy 1 <= k <= n={n}, got {k}")
        x = np.asarray(x, dtype=np.float64)
        fetch = min(n, k + 4)
        while True:
            _, c = self.tree.query(x, k=fetch)
            c = np.atleast_1d(c)
            d = ((self.points[c] - x) ** 2).sum(axis=1)
            order = np.lexsort((c, d))
            c, d = c[order], d[order]
            if fetch == n or d[-1] > d[k - 1] * (1 + 1e-9) + 1e-300:
                return c[:k]
            fetch = min(n, 2 * fetch)


def build_knn_index(cloud) -> NeighborIndex:
    pts = as_points(cloud)
    pts.setflags(write=False)
    return NeighborIndex(pts, cKDTree(pts))


def k_nearest(index: NeighborIndex, query_point_index: int, k: int) -> list[int]:
    return index.query([query_point_index], k)[0].tolist()


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """(n, k) neighbor lists for every point, fast path used inside the network."""
    n = len(points)
    if k < 1 or k >= n:
        raise KTooLarge(f"k must satisfy 1 <= k < n={n}, got {k}")
    tree = cKDTree(points)
    fetch = min(n, k + 2)
    dist, idx = tree.query(points, k=fetch)
    if not np.all(np.isfinite(dist)) or np.any(idx >= n):
        raise NonFiniteValue("neighbor distances overflow; coordinates are too large or not finite")
    # the tree does not order equal distances by index; rows with any tie
    # (or where a coincident point precedes the query itself) go the slow way
    rows = np.arange(n)
    bad = (idx[:, 0] != rows) | np.any(np.diff(dist, axis=1) <= 0, axis=1)
    out = idx[:, 1 : k + 1].copy()
    if np.any(bad):
        out[bad] = NeighborIndex(points, tree).query(rows[bad], k)
    return out


def farthest_point_sample(cloud, m: int, seed: int, start: int | None = None) -> list[int]:
    """Greedy max-min sampling; the first index is random (or ``start``)."""
    pts = as_points(cloud)
    n = len(pts)
    if m > n:
        raise SampleTooLarge(f"cannot sample {m} of {n} points")
    if m < 1:
        raise ValueError("m must be >= 1")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = [int(start)]
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    mind[start] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
        mind[chosen] = -1.0
    return chosen


@dataclass(frozen=True)
class NormalizationTransform:
    translation: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation


def normalize_patch(points) -> tuple[np.ndarray, NormalizationTransform]:
    """Center at the centroid and scale by the max centroid distance (1 if degenerate)."""
    pts = as_points(points)
    center = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - center) ** 2).sum(axis=1).max()))
    if not scale > 0.0:
        scale = 1.0
    tf = NormalizationTransform(center, scale)
    normalized = tf.apply(pts)
    # rounding may leave a point a hair outside the unit ball
    norms = np.sqrt((normalized**2).sum(axis=1))
    over = norms > 1.0
    if np.any(over):
        normalized[over] /= norms[over, None]
    return normalized, tf


def denormalize(points, transform: NormalizationTransform) -> np.ndarray:
    return transform.invert(points)


@dataclass
class Patch:
    """A fixed-size neighborhood of a parent cloud.

    ``owned`` marks which of ``indices`` this patch is responsible for when
    per-patch results are stitched back into the parent cloud.
    """

    indices: np.ndarray
    center: np.ndarray
    scale: float
    points: np.ndarray
    owned: np.ndarray

    @property
    def transform(self) -> NormalizationTransform:
        return NormalizationTransform(self.center, self.scale)

    @property
    def owned_indices(self) -> np.ndarray:
        return self.indices[self.owned]


def extract_patches(cloud, patch_size: int, seeds) -> list[Patch]:
    """kNN patches around each seed, with a partition of points into owners.

    Each point is owned by the nearest seed whose patch contains it.  Points
    covered by no seed patch get extra patches (seeded at the uncovered point
    farthest from all seeds) until the whole cloud is covered, so the
    returned list can be longer than ``seeds``.
    """
    pts = as_points(cloud)
    n = len(pts)
    if patch_size > n:
        raise PatchTooLarge(f"patch_size {patch_size} exceeds cloud size {n}")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    index = build_knn_index(pts)
    members = [np.sort(index.query_point(pts[s], patch_size)) for s in seeds]
    covered = np.zeros(n, dtype=bool)
    for m in members:
        covered[m] = True
    while not covered.all():
        seed_pts = pts[seeds]
        d = cKDTree(seed_pts).query(pts)[0]
        d[covered] = -1.0
        s = int(np.argmax(d))
        seeds.append(s)
        m = np.sort(index.query_point(pts[s], patch_size))
        members.append(m)
        covered[m] = True

    # owner = nearest seed among the patches containing the point
    best = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.intp)
    for p, (s, m) in enumerate(zip(seeds, members)):
        d = ((pts[m] - pts[s]) ** 2).sum(axis=1)
        better = d < best[m]
        best[m[better]] = d[better]
        owner[m[better]] = p

    patches = []
    for p, (s, m) in enumerate(zip(seeds, members)):
        normalized, tf = normalize_patch(pts[m])
        patches.append(Patch(m, tf.translation, tf.scale, normalized, owner[m] == p))
    return patches


# --- synthetic shapes ----------------------------------------------------


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus(n, rng, R=TORUS_MAJOR, r=TORUS_MINOR):
    # area element is proportional to (R + r cos v); rejection on v
    out = np.empty(0)
    vs = []
    need = n
    while need > 0:
        v = rng.uniform(0, 2 * np.pi, size=2 * need)
        keep = rng.uniform(0, R + r, size=2 * need) < R + r * np.cos(v)
        vs.append(v[keep])
        need -= int(keep.sum())
    v = np.concatenate(vs)[:n]
    u = rng.uniform(0, 2 * np.pi, size=n)
    out = np.stack(
        [(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1
    )
    return out


def _box(n, rng, extent=BOX_EXTENT):
    a, b, c = (e / 2 for e in extent)
    # faces: +-x (area 4bc), +-y (4ac), +-z (4ab)
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = np.array([a, b, c])
    for ax in range(3):
        sel = axis == ax
        o1, o2 = [d for d in range(3) if d != ax]
        pts[sel, ax] = sign[sel] * half[ax]
        pts[sel, o1] = u[sel] * half[o1]
        pts[sel, o2] = v[sel] * half[o2]
    return pts


def _gear_outline(teeth=GEAR_TEETH, outer=GEAR_OUTER, inner=GEAR_INNER):
    """Closed polygon (m, 2) of a toothed wheel, counter-clockwise."""
    pts = []
    for t in range(teeth):
        a0 = 2 * np.pi * t / teeth
        step = 2 * np.pi / teeth
        for frac, rad in ((0.0, inner), (0.15, outer), (0.5, outer), (0.65, inner)):
            ang = a0 + frac * step
            pts.append((rad * np.cos(ang), rad * np.sin(ang)))
    return np.asarray(pts)


def _gear(n, rng, height=GEAR_HEIGHT):
    poly = _gear_outline()
    nxt = np.roll(poly, -1, axis=0)
    edge_len = np.linalg.norm(nxt - poly, axis=1)
    # fan triangles from the origin (the outline is star-shaped about it)
    tri_area = 0.5 * np.abs(poly[:, 0] * nxt[:, 1] - poly[:, 1] * nxt[:, 0])
    side_area = edge_len * height
    areas = np.concatenate([side_area, tri_area, tri_area])
    m = len(poly)
    part = rng.choice(3 * m, size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    side = part < m
    e = part[side]
    t = rng.uniform(0, 1, size=e.size)
    pts[side, :2] = poly[e] + t[:, None] * (nxt[e] - poly[e])
    pts[side, 2] = rng.uniform(-height / 2, height / 2, size=e.size)
    cap = ~side
    tri = part[cap] % m
    r1 = rng.uniform(size=tri.size)
    r2 = rng.uniform(size=tri.size)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    pts[cap, :2] = r1[:, None] * poly[tri] + r2[:, None] * nxt[tri]
    pts[cap, 2] = np.where(part[cap] < 2 * m, height / 2, -height / 2)
    return pts


_SAMPLERS = {"sphere": _sphere, "torus": _torus, "box": _box, "gear": _gear}


def sample_parametric_shape(shape: str, n: int, seed: int) -> PointCloud:
    """Approximately uniform surface samples of a built-in shape."""
    if shape not in _SAMPLERS:
        raise UnknownShape(f"unknown shape {shape!r}; choose from {SHAPES}")
    if n < 16:
        raise ValueError("need at least 16 points")
    rng = np.random.default_rng(seed)
    return PointCloud(_SAMPLERS[shape](int(n), rng), Label.clean, f"{shape}")


def parametric_mesh(shape: str, resolution: int = 32):
    """A triangle mesh approximating ``shape``; returns (vertices, triangles)."""
    if shape == "sphere":
        return _icosphere(max(0, min(5, int(math.log2(max(resolution, 1))) - 1)))
    if shape == "torus":
        nu, nv = 2 * resolution, resolution
        u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
        v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
        uu, vv = np.meshgrid(u, v, indexing="ij")
        R, r = TORUS_MAJOR, TORUS_MINOR
        verts = np.stack(
            [(R + r * np.cos(vv)) * np.cos(uu), (R + r * np.cos(vv)) * np.sin(uu), r * np.sin(vv)],
            axis=-1,
        ).reshape(-1, 3)
        tris = []
        for i in range(nu):
            for j in range(nv):
                a = i * nv + j
                b = ((i + 1) % nu) * nv + j
                c = ((i + 1) % nu) * nv + (j + 1) % nv
                d = i * nv + (j + 1) % nv
                tris += [(a, b, c), (a, c, d)]
        return verts, np.asarray(tris, dtype=np.intp)
    if shape == "box":
        h = np.asarray(BOX_EXTENT) / 2
        verts = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * h
        tris = np.array(
            [
                [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
                [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
                [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
            ],
            dtype=np.intp,
        )
        return verts, tris
    if shape == "gear":
        poly = _gear_outline()
        m = len(poly)
        hz = GEAR_HEIGHT / 2
        top = np.column_stack([poly, np.full(m, hz)])
        bot = np.column_stack([poly, np.full(m, -hz)])
        verts = np.vstack([top, bot, [[0, 0, hz], [0, 0, -hz]]])
        ct, cb = 2 * m, 2 * m + 1
        tris = []
        for i in range(m):
            j = (i + 1) % m
            tris += [(i, j, m + j), (i, m + j, m + i), (ct, i, j), (cb, m + j, m + i)]
        return verts, np.asarray(tris, dtype=np.intp)
    raise UnknownShape(f"unknown shape {shape!r}; choose from {SHAPES}")


def _icosphere(subdivisions: int):
    t = (1 + 5**0.5) / 2
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                v = verts[a] + verts[b]
                verts.append(v / np.linalg.norm(v))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.asarray(verts), np.asarray(faces, dtype=np.intp)
