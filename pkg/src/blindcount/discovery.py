"""Post-hoc example discovery: show the user what each count counted.

For each predicted density map, seed points are local maxima of
``target - max(others)``; a diverse subset is chosen by farthest-point
selection in backbone feature space. Each seed grows into a region of the
density map (a thresholded connected component) that is cropped from the
image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .matching import PredictionSet

DEFAULT_PEAK_FRACTION = 0.35
DEFAULT_REL_FLOOR = 0.1
DEFAULT_ABS_FLOOR = 1e-6
DEFAULT_MARGIN = 2


@dataclass
class ExampleSet:
    head_index: int
    count: float
    seed_points: list[tuple[int, int]] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    regions: list[tuple[tuple[int, int, int, int], np.ndarray]] = field(default_factory=list)
    crops: list[np.ndarray] = field(default_factory=list)
    scarce: bool = False  # fewer seeds found than requested

    def to_dict(self) -> dict:
        return {
            "head_index": self.head_index,
            "count": self.count,
            "seed_points": [list(p) for p in self.seed_points],
            "scores": self.scores,
            "bboxes": [list(b) for b, _ in self.regions],
            "region_pixels": [int(m.sum()) for _, m in self.regions],
            "scarce": self.scarce,
        }


def seed_scores(target: np.ndarray, others: Sequence[np.ndarray]) -> np.ndarray:
    """How much a pixel belongs to ``target`` and not to any other map."""
    target = np.asarray(target, dtype=np.float64)
    if len(others) == 0:
        return target.copy()
    rest = np.max(np.stack([np.asarray(o, dtype=np.float64) for o in others]), axis=0)
    if rest.shape != target.shape:
        raise ValueError("density maps must share dimensions")
    return target - rest


def sample_features(features: np.ndarray, x: float, y: float, h: int, w: int) -> np.ndarray:
    """Bilinear sample of a (k, gh, gw) feature grid at image pixel ``(x, y)``."""
    k, gh, gw = features.shape
    fx = np.clip((x + 0.5) * gw / w - 0.5, 0, gw - 1)
    fy = np.clip((y + 0.5) * gh / h - 0.5, 0, gh - 1)
    x0, y0 = int(np.floor(fx)), int(np.floor(fy))
    x1, y1 = min(x0 + 1, gw - 1), min(y0 + 1, gh - 1)
    ax, ay = fx - x0, fy - y0
    return ((1 - ay) * ((1 - ax) * features[:, y0, x0] + ax * features[:, y0, x1])
            + ay * ((1 - ax) * features[:, y1, x0] + ax * features[:, y1, x1]))


def find_seed_points(target, others: Sequence, features: np.ndarray | None, n_points: int,
                     rel_floor: float = DEFAULT_REL_FLOOR,
                     abs_floor: float = DEFAULT_ABS_FLOOR) -> list[tuple[int, int]]:
    """Up to ``n_points`` diverse ``(x, y)`` seeds for ``target``.

    Candidates are 3x3 local maxima of the score above
    ``max(abs_floor, rel_floor * max score)``. The first pick is the best
    scoring candidate; each further pick maximises its smallest feature
    distance to those already chosen. Ties go to the earliest in raster order.
    Fewer points (possibly none) are returned when candidates run out.
    """
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    score = seed_scores(target, others)
    h, w = score.shape
    top = float(score.max())
    floor = max(abs_floor, rel_floor * top)
    if top <= floor:
        return []
    peaks = (score == ndimage.maximum_filter(score, size=3, mode="constant", cval=-np.inf))
    ys, xs = np.nonzero(peaks & (score > floor))  # raster order
    if ys.size == 0:
        return []
    if features is None:
        feats = np.zeros((ys.size, 1))
    else:
        feats = np.stack([sample_features(features, x, y, h, w) for x, y in zip(xs, ys)])

    first = int(np.argmax(score[ys, xs]))  # argmax returns the earliest of equals
    chosen = [first]
    dist = np.linalg.norm(feats - feats[first], axis=1)
    available = np.ones(ys.size, dtype=bool)
    available[first] = False
    while len(chosen) < n_points and available.any():
        masked = np.where(available, dist, -np.inf)
        nxt = int(np.argmax(masked))
        chosen.append(nxt)
        available[nxt] = False
        dist = np.minimum(dist, np.linalg.norm(feats - feats[nxt], axis=1))
    return [(int(xs[i]), int(ys[i])) for i in chosen]


def min_pairwise_distance(points: Sequence[tuple[int, int]], features: np.ndarray,
                          h: int, w: int) -> float:
    if len(points) < 2:
        return float("inf")
    f = np.stack([sample_features(features, x, y, h, w) for x, y in points])
    d = np.linalg.norm(f[:, None] - f[None], axis=2)
    return float(d[np.triu_indices(len(points), 1)].min())


def extract_region(image: np.ndarray | None, density, seed: tuple[int, int],
                   peak_fraction: float = DEFAULT_PEAK_FRACTION,
                   margin: int = DEFAULT_MARGIN):
    """4-connected region around ``seed`` where density >= ``peak_fraction`` * density(seed).

    Returns ``(bbox, mask)`` with ``bbox = (x0, y0, x1, y1)`` (end exclusive),
    padded by ``margin`` and clipped to the raster.
    """
    d = np.asarray(density, dtype=np.float64)
    h, w = d.shape
    x, y = seed
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"seed {seed} outside {w}x{h} raster")
    if not 0 < peak_fraction < 1:
        raise ValueError("peak_fraction must lie in (0, 1)")
    peak = d[y, x]
    if peak <= 0:
        raise ValueError(f"density at seed {seed} is zero")
    labels, _ = ndimage.label(d >= peak_fraction * peak)  # default structure is 4-connected
    mask = labels == labels[y, x]
    rows, cols = np.nonzero(mask)
    bbox = (max(int(cols.min()) - margin, 0), max(int(rows.min()) - margin, 0),
            min(int(cols.max()) + 1 + margin, w), min(int(rows.max()) + 1 + margin, h))
    return bbox, mask


def discover_examples(image: np.ndarray, preds: PredictionSet, features: np.ndarray | None,
                      n_per_head: int = 3, peak_fraction: float = DEFAULT_PEAK_FRACTION,
                      margin: int = DEFAULT_MARGIN) -> list[ExampleSet]:
    """One ``ExampleSet`` per prediction, with seeds, regions and image crops."""
    out = []
    for k in range(len(preds)):
        target = preds.maps[k]
        others = [preds.maps[o] for o in range(len(preds)) if o != k]
        seeds = find_seed_points(target, others, features, n_per_head)
        scores = seed_scores(target, others)
        ex = ExampleSet(head_index=preds.sources[k][0], count=float(preds.counts[k]),
                        scarce=len(seeds) < n_per_head)
        for x, y in seeds:
            bbox, mask = extract_region(image, target, (x, y), peak_fraction, margin)
            ex.seed_points.append((x, y))
            ex.scores.append(float(scores[y, x]))
            ex.regions.append((bbox, mask))
            x0, y0, x1, y1 = bbox
            ex.crops.append(np.asarray(image)[y0:y1, x0:x1].copy())
        out.append(ex)
    return out


def write_examples(out_dir, examples: Sequence[ExampleSet], upscale: int = 4) -> None:
    """Write ``crop_<head>_<idx>.png`` files and ``examples.json``.

    The JSON lists seed points per head and doubles as seed input for an
    external point-prompted segmenter.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for ex in examples:
        rec = ex.to_dict()
        rec["crops"] = []
        for idx, crop in enumerate(ex.crops):
            name = f"crop_{ex.head_index}_{idx}.png"
            img = Image.fromarray(crop)
            if upscale > 1:
                img = img.resize((crop.shape[1] * upscale, crop.shape[0] * upscale), Image.NEAREST)
            img.save(out / name)
            rec["crops"].append(name)
        records.append(rec)
    (out / "examples.json").write_text(json.dumps({"examples": records}, indent=1))
