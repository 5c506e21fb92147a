"""File formats: XYZ/PLY point clouds, OFF/PLY meshes, PGM/PPM images, checkpoints."""
from __future__ import annotations

import io as _io
import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError, IoError, NonFiniteValue
from .network import DenoiserConfig, DenoiserParams

__all__ = [
    "read_xyz",
    "write_xyz",
    "read_ply",
    "write_ply",
    "read_points",
    "write_points",
    "read_mesh",
    "read_off",
    "write_off",
    "read_pnm",
    "write_pnm",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "UCAN-CKPT v1"


def _finite(arr, path):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{path}: non-finite values")
    return arr


def _open_write(path, mode="w"):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, **({"encoding": "utf-8", "newline": "\n"} if "b" not in mode else {}))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_text(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _rows(pts):
    # repr of a Python float is the shortest string that round-trips exactly
    return (" ".join(repr(float(v)) for v in row) + "\n" for row in pts)


# --- point clouds ---------------------------------------------------------------


def read_xyz(path) -> np.ndarray:
    """One ``x y z`` per line; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(_read_text(path).splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise DataError(f"{path}:{lineno}: expected three coordinates")
        try:
            rows.append([float(v) for v in parts[:3]])
        except ValueError:
            raise DataError(f"{path}:{lineno}: not a number") from None
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return _finite(pts, path)


def write_xyz(path, points) -> None:
    pts = _finite(np.asarray(points, dtype=np.float64).reshape(-1, 3), path)
    with _open_write(path) as fh:
        fh.writelines(_rows(pts))


def _ply_header(text, path):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    fmt = None
    elements = []
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            break
    if fmt != "ascii":
        raise DataError(f"{path}: only ASCII PLY is supported")
    return elements, lines[i:]


def read_ply(path, with_faces=False):
    """ASCII PLY; returns vertices, or ``(vertices, triangles)`` if asked."""
    elements, body = _ply_header(_read_text(path), path)
    body = [ln for ln in body if ln.strip()]
    pos = 0
    verts = np.zeros((0, 3))
    faces = []
    for name, count, props in elements:
        rows = body[pos : pos + count]
        pos += count
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                cols = [names.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise DataError(f"{path}: vertex element lacks x/y/z") from None
            verts = np.asarray([[float(r.split()[c]) for c in cols] for r in rows]).reshape(-1, 3)
        elif name == "face":
            for r in rows:
                vals = [int(v) for v in r.split()]
                k = vals[0]
                idx = vals[1 : 1 + k]
                faces.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    _finite(verts, path)
    if with_faces:
        return verts, np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    return verts


def write_ply(path, points, triangles=None) -> None:
    pts = _finite(np.asarray(points, dtype=np.float64).reshape(-1, 3), path)
    with _open_write(path) as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if triangles is not None:
            fh.write(f"element face {len(triangles)}\nproperty list uchar int vertex_indices\n")
        fh.write("end_header\n")
        fh.writelines(_rows(pts))
        if triangles is not None:
            for a, b, c in np.asarray(triangles):
                fh.write(f"3 {a} {b} {c}\n")


def read_points(path) -> np.ndarray:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


def write_points(path, points) -> None:
    (write_ply if str(path).lower().endswith(".ply") else write_xyz)(path, points)


def read_off(path):
    tokens = []
    for line in _read_text(path).splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise DataError(f"{path}: not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.asarray(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        idx = [int(t) for t in tokens[pos + 1 : pos + 1 + k]]
        pos += 1 + k
        faces.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    return _finite(verts, path), np.asarray(faces, dtype=np.intp).reshape(-1, 3)


def write_off(path, vertices, triangles) -> None:
    with _open_write(path) as fh:
        fh.write(f"OFF\n{len(vertices)} {len(triangles)} 0\n")
        fh.writelines(_rows(np.asarray(vertices, dtype=np.float64)))
        for a, b, c in np.asarray(triangles):
            fh.write(f"3 {a} {b} {c}\n")


def read_mesh(path):
    if str(path).lower().endswith(".off"):
        return read_off(path)
    return read_ply(path, with_faces=True)


# --- images -----------------------------------------------------------------------


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit; returns floats in [0, 1].

    Grayscale images come back as (H, W), color as (H, W, 3).
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise DataError(f"{path}: only 8-bit P5/P6 images are supported")
    ch = 1 if magic == "P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos)
    img = data.astype(np.float64) / 255.0
    return img.reshape(h, w) if ch == 1 else img.reshape(h, w, 3)


def write_pnm(path, image) -> None:
    """Write floats in [0, 1] as 8-bit PGM (2-D) or PPM (H, W, 3); values are clipped."""
    img = np.asarray(image, dtype=np.float64)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise DataError(f"cannot write image of shape {img.shape}")
    with _open_write(path, "wb") as fh:
        fh.write(header.encode("ascii") + q.tobytes())


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, arrays: dict, config: dict | None = None, binary: bool = False) -> None:
    """Named float64 arrays behind a ``UCAN-CKPT v1`` header.

    Text layout: header, ``encoding text``, optional ``config <json>``, then
    per array a line ``array <name> <d0,d1,...>`` followed by one line of
    row-major values in round-trip ``repr`` form.  The binary layout uses
    the same header lines but stores each array's values as little-endian
    float64 bytes right after its ``array`` line.
    """
    with _open_write(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}\nencoding {'binary' if binary else 'text'}\n".encode())
        if config is not None:
            fh.write(f"config {json.dumps(config, sort_keys=True)}\n".encode())
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            shape = ",".join(str(d) for d in arr.shape)
            fh.write(f"array {name} {shape}\n".encode())
            if binary:
                fh.write(arr.astype("<f8").tobytes())
            else:
                fh.write((" ".join(repr(float(v)) for v in arr.ravel()) + "\n").encode())


def load_checkpoint(path) -> tuple[dict, dict | None]:
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, config)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    buf = _io.BytesIO(raw)

    def line():
        return buf.readline().decode("utf-8").rstrip("\n")

    if line() != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: missing '{CHECKPOINT_MAGIC}' header")
    enc = line()
    if enc not in ("encoding text", "encoding binary"):
        raise DataError(f"{path}: bad encoding line {enc!r}")
    binary = enc.endswith("binary")
    config = None
    arrays = {}
    while True:
        ln = line()
        if not ln:
            if buf.tell() >= len(raw):
                break
            continue
        if ln.startswith("config "):
            config = json.loads(ln[len("config ") :])
            continue
        tag, name, shape = ln.split(" ", 2)
        if tag != "array":
            raise DataError(f"{path}: unexpected record {ln[:40]!r}")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        count = int(np.prod(dims)) if dims else 1
        if binary:
            vals = np.frombuffer(buf.read(8 * count), dtype="<f8").astype(np.float64)
        else:
            body = line().split()
            vals = np.asarray([float(v) for v in body], dtype=np.float64)
        if vals.size != count:
            raise DataError(f"{path}: array {name} has {vals.size} values, expected {count}")
        arrays[name] = vals.reshape(dims)
    return arrays, config


def save_model(path, params: DenoiserParams, binary: bool = False, extra: dict | None = None) -> None:
    config = params.config.to_dict()
    config["predictor_widths"] = list(config["predictor_widths"])
    if extra:
        config = {**config, **extra}
    save_checkpoint(path, params.arrays, config, binary)


def load_model(path) -> tuple[DenoiserParams, dict]:
    """Returns the params plus any extra header keys (e.g. the training noise level)."""
    arrays, config = load_checkpoint(path)
    if config is None:
        raise DataError(f"{path}: model checkpoint lacks a config header")
    net_keys = set(DenoiserConfig.__dataclass_fields__)
    net = DenoiserConfig(**{k: v for k, v in config.items() if k in net_keys})
    extra = {k: v for k, v in config.items() if k not in net_keys}
    return DenoiserParams(net, arrays), extra


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with _open_write(tmp) as fh:
        fh.write(text)
    os.replace(tmp, path)
