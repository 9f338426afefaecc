"""Density rasters: pseudo-density generation, counting and map algebra.

Density maps are plain 2-D float64 numpy arrays. ``as_density`` validates
them at module boundaries; everything else is vectorised numpy.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_SIGMA = 2.0
_MAGIC = b"DMAP"
_HEADER = struct.Struct("<4sIII")


def as_density(values) -> np.ndarray:
    """Return ``values`` as a validated float64 density map."""
    d = np.asarray(values, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("density map contains non-finite values")
    if np.any(d < 0):
        raise ValueError("density map contains negative values")
    return d


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"density map shapes differ: {a.shape} vs {b.shape}")


def integrate(density) -> float:
    """Count by integration: the sum of the density over all pixels."""
    return float(np.sum(density, dtype=np.float64))


def pseudo_density(centers: Sequence[tuple[float, float]], h: int, w: int,
                   sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Place one unit-mass Gaussian kernel on the pixel containing each ``(x, y)`` center.

    Kernels are cut at ``ceil(4 sigma)`` and by the raster border, then each
    is rescaled to sum to exactly one, so the map integrates to ``len(centers)``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((h, w), dtype=np.float64)
    radius = int(math.ceil(4 * sigma))
    for x, y in centers:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"center ({x}, {y}) outside {w}x{h} raster")
        cx, cy = int(x), int(y)
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
        yy = np.arange(y0, y1)[:, None] - cy
        xx = np.arange(x0, x1)[None, :] - cx
        kernel = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
        out[y0:y1, x0:x1] += kernel / kernel.sum()
    return out


def _unit(d: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(d)
    return d / norm if norm > 0 else np.zeros_like(d)


def normalized_cost(gt, pred) -> float:
    """L2 distance between the two maps after each is scaled to unit L2 norm.

    An all-zero map normalises to the zero map.
    """
    a, b = np.asarray(gt, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    _same_shape(a, b)
    return float(np.linalg.norm(_unit(a) - _unit(b)))


def l1_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return float(np.abs(a - b).sum())


def _stack(maps: Sequence) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("need at least one density map")
    arrays = [np.asarray(m, dtype=np.float64) for m in maps]
    for m in arrays[1:]:
        _same_shape(arrays[0], m)
    return np.stack(arrays)


def combine_sum(maps: Sequence) -> np.ndarray:
    return _stack(maps).sum(axis=0)


def combine_max(maps: Sequence) -> np.ndarray:
    return _stack(maps).max(axis=0)


# -- file format ------------------------------------------------------------

def write_dmap(path, density, provenance: dict | None = None) -> None:
    """Write a ``.dmap`` raster plus a ``.json`` provenance sidecar.

    Layout: 16-byte header (``b"DMAP"``, u32 height, u32 width, u32 reserved)
    followed by little-endian float32 values in row-major order.
    """
    d = as_density(density)
    path = Path(path)
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, h, w, 0))
        f.write(d.astype("<f4").tobytes(order="C"))
    if provenance is not None:
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(provenance, sort_keys=True, indent=1))


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, h, w, _ = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def read_provenance(path) -> dict:
    path = Path(path)
    return json.loads(path.with_name(path.name + ".json").read_text())
