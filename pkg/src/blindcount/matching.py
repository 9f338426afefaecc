"""Label/prediction correspondence, matched L1 loss and deployment post-processing."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .assignment import Assignment, DimensionError, solve_lap
from .densitymap import combine_max, combine_sum, integrate, l1_distance, normalized_cost

DEFAULT_SIMILARITY_THRESHOLD = 0.15
DEFAULT_ZERO_THRESHOLD = 0.5
DEFAULT_FREQUENCY_THRESHOLD = 0.004
# Normalised cost below which an unmatched head is treated as a sub-class of
# a label when combining. For nonnegative maps this means cosine similarity > 0.5.
DEFAULT_SUBCLASS_THRESHOLD = 1.0


@dataclass
class PredictionSet:
    """Density maps from the prediction heads and their integrated counts.

    ``sources`` records which raw heads each entry came from; after
    post-processing an entry may stand for several merged heads.
    """

    maps: list[np.ndarray]
    counts: list[float] = field(default_factory=list)
    sources: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.maps = [np.asarray(m, dtype=np.float64) for m in self.maps]
        if not self.counts:
            self.counts = [integrate(m) for m in self.maps]
        if not self.sources:
            self.sources = [(i,) for i in range(len(self.maps))]
        if not (len(self.maps) == len(self.counts) == len(self.sources)):
            raise ValueError("maps, counts and sources must have equal length")

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class MatchedLoss:
    assignment: Assignment
    loss: float
    per_pair_losses: list[float]


def _as_prediction_set(preds) -> PredictionSet:
    return preds if isinstance(preds, PredictionSet) else PredictionSet(list(preds))


def build_cost_matrix(gts: Sequence, preds) -> np.ndarray:
    """Entry ``(i, j)`` is the normalised cost between label ``j`` and prediction ``i``."""
    preds = _as_prediction_set(preds)
    if len(gts) < 1:
        raise DimensionError("need at least one ground-truth map")
    if len(gts) > len(preds):
        raise DimensionError(f"{len(gts)} labels but only {len(preds)} predictions")
    costs = np.empty((len(preds), len(gts)))
    for i, p in enumerate(preds.maps):
        for j, g in enumerate(gts):
            costs[i, j] = normalized_cost(g, p)
    return costs


def match(gts: Sequence, preds) -> Assignment:
    return solve_lap(build_cost_matrix(gts, preds))


def matched_loss(gts: Sequence, preds) -> MatchedLoss:
    """Sum of L1 distances over the pairs chosen by normalised-cost matching.

    Unmatched predictions contribute nothing.
    """
    preds = _as_prediction_set(preds)
    assignment = match(gts, preds)
    per_pair = [l1_distance(gts[j], preds.maps[i]) for i, j in assignment.pairs]
    return MatchedLoss(assignment, float(sum(per_pair)), per_pair)


def evaluate_matched(gts: Sequence, preds) -> list[tuple[float, float]]:
    """``(true count, predicted count)`` for every label under the optimal matching."""
    preds = _as_prediction_set(preds)
    assignment = match(gts, preds)
    return [(integrate(gts[j]), preds.counts[i]) for i, j in assignment.pairs]


def evaluate_combined(gts: Sequence, preds, mode: str = "sum",
                      subclass_threshold: float = DEFAULT_SUBCLASS_THRESHOLD,
                      zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
                      ) -> tuple[list[tuple[float, float]], Assignment]:
    """Matched evaluation where unmatched heads may be folded into a label as sub-classes.

    An unmatched head with count >= ``zero_threshold`` joins the label it is
    closest to (normalised cost) when that cost is below ``subclass_threshold``.
    Each label's maps are then combined with ``combine_sum`` or ``combine_max``.
    """
    if mode not in ("sum", "max"):
        raise ValueError(f"unknown combine mode {mode!r}")
    preds = _as_prediction_set(preds)
    costs = build_cost_matrix(gts, preds)
    assignment = solve_lap(costs)
    groups = {j: [i] for i, j in assignment.pairs}
    matched = set(assignment.predictions)
    for i in range(len(preds)):
        if i in matched or preds.counts[i] < zero_threshold:
            continue
        j = int(np.argmin(costs[i]))
        if costs[i, j] < subclass_threshold:
            groups[j].append(i)
    combine = combine_sum if mode == "sum" else combine_max
    pairs = []
    for j in range(len(gts)):
        merged = combine([preds.maps[i] for i in groups[j]])
        pairs.append((integrate(gts[j]), integrate(merged)))
    return pairs, assignment


def deployment_postprocess(preds, similarity_threshold: float = DEFAULT_SIMILARITY_THRESHOLD,
                           zero_threshold: float = DEFAULT_ZERO_THRESHOLD) -> PredictionSet:
    """Drop near-zero predictions and merge near-duplicates, without any labels.

    Predictions below ``zero_threshold`` are removed first. The rest are
    visited by descending count; each joins the first existing group whose
    running averaged map is within ``similarity_threshold`` (normalised cost),
    otherwise it starts a new group. Output is sorted by descending count.
    """
    if similarity_threshold < 0 or zero_threshold < 0:
        raise ValueError("thresholds must be nonnegative")
    preds = _as_prediction_set(preds)
    order = sorted(range(len(preds)), key=lambda i: (-preds.counts[i], i))
    groups: list[tuple[list[int], np.ndarray]] = []
    for i in order:
        if preds.counts[i] < zero_threshold:
            continue
        for members, merged in groups:
            if normalized_cost(merged, preds.maps[i]) < similarity_threshold:
                members.append(i)
                merged[...] = np.mean([preds.maps[k] for k in members], axis=0)
                break
        else:
            groups.append(([i], preds.maps[i].copy()))

    maps = [merged for _, merged in groups]
    counts = [integrate(m) for m in maps]
    sources = [tuple(s for k in members for s in preds.sources[k]) for members, _ in groups]
    keep = sorted(range(len(maps)), key=lambda k: (-counts[k], k))
    return PredictionSet([maps[k] for k in keep], [counts[k] for k in keep],
                         [sources[k] for k in keep])


def head_utilization(match_log: Iterable[Assignment], n_heads: int,
                     frequency_threshold: float = DEFAULT_FREQUENCY_THRESHOLD) -> float:
    """Fraction of heads matched more often than ``frequency_threshold`` of all label matches."""
    uses: Counter[int] = Counter()
    total = 0
    for a in match_log:
        for i, _ in a.pairs:
            uses[i] += 1
            total += 1
    if total == 0:
        raise ValueError("match log is empty")
    frequent = sum(1 for h in range(n_heads) if uses[h] / total > frequency_threshold)
    return frequent / n_heads


def write_match_log(path, entries: Iterable[tuple[str, Assignment]]) -> None:
    with open(path, "w") as f:
        for image_id, a in entries:
            f.write(json.dumps({"image_id": image_id, **a.to_dict()}) + "\n")


def read_match_log(path) -> list[tuple[str, Assignment]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((rec["image_id"], Assignment.from_dict(rec)))
    return out
