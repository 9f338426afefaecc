"""Rectangular minimum-cost linear assignment.

Labels are the columns of the cost matrix and predictions are the rows; every
label is assigned to a distinct prediction. The solver is the shortest
augmenting path variant of Jonker-Volgenant for rectangular problems, run
with labels as the augmenting side so no square padding is needed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

BRUTE_FORCE_MAX_ROWS = 8


class DimensionError(ValueError):
    """Raised when a cost matrix has the wrong shape or non-finite entries."""


@dataclass(frozen=True)
class Assignment:
    """Injective map from labels to predictions.

    ``pairs`` holds ``(prediction, label)`` tuples sorted by label.
    """

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    @property
    def predictions(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.pairs)

    def prediction_for(self, label: int) -> int:
        for i, j in self.pairs:
            if j == label:
                return i
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"pairs": [[i, j] for i, j in self.pairs], "total_cost": self.total_cost}

    @classmethod
    def from_dict(cls, data: dict) -> "Assignment":
        pairs = tuple(sorted(((int(i), int(j)) for i, j in data["pairs"]), key=lambda p: p[1]))
        return cls(pairs, float(data["total_cost"]))


def check_cost_matrix(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise DimensionError(f"cost matrix must be 2-D and non-empty, got shape {c.shape}")
    if c.shape[1] > c.shape[0]:
        raise DimensionError(
            f"more labels ({c.shape[1]}) than predictions ({c.shape[0]}); cannot assign injectively"
        )
    if not np.all(np.isfinite(c)):
        raise DimensionError("cost matrix contains NaN or Inf")
    if np.any(c < 0):
        raise DimensionError("cost matrix contains negative entries")
    return c


def _tie_tolerance(c: np.ndarray) -> float:
    # Costs within this of the optimum count as ties. Large enough to absorb
    # summation-order rounding, far below any meaningful cost gap.
    return 1e-9 * (1.0 + float(np.abs(c).max()) * c.shape[1])


def _shortest_augmenting_path(c: np.ndarray) -> tuple[np.ndarray, float]:
    """Return ``pred_for_label`` for ``c`` with shape (n_pred, n_label)."""
    cost = c.T  # rows: labels (the smaller side), cols: predictions
    n_rows, n_cols = cost.shape
    u = np.zeros(n_rows)
    v = np.zeros(n_cols)
    col_for_row = np.full(n_rows, -1, dtype=np.int64)
    row_for_col = np.full(n_cols, -1, dtype=np.int64)

    for cur_row in range(n_rows):
        shortest = np.full(n_cols, np.inf)
        path = np.full(n_cols, -1, dtype=np.int64)
        scanned_cols = np.zeros(n_cols, dtype=bool)
        scanned_rows = [cur_row]
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            reduced = min_val + cost[i] - u[i] - v
            better = (~scanned_cols) & (reduced < shortest)
            path[better] = i
            shortest[better] = reduced[better]

            candidates = np.flatnonzero(~scanned_cols)
            lowest = shortest[candidates].min()
            at_lowest = candidates[shortest[candidates] == lowest]
            # Prefer an unassigned column among equals: ends the search early.
            free = at_lowest[row_for_col[at_lowest] < 0]
            j = int(free[0]) if free.size else int(at_lowest[0])

            min_val = float(lowest)
            scanned_cols[j] = True
            if row_for_col[j] < 0:
                sink = j
            else:
                i = int(row_for_col[j])
                scanned_rows.append(i)

        u[cur_row] += min_val
        for r in scanned_rows[1:]:
            u[r] += min_val - shortest[col_for_row[r]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]

        j = sink
        while True:
            i = int(path[j])
            row_for_col[j] = i
            col_for_row[i], j = j, int(col_for_row[i])
            if i == cur_row:
                break

    total = float(c[col_for_row, np.arange(n_rows)].sum())
    return col_for_row, total


def _optimal_cost(c: np.ndarray) -> float:
    return _shortest_augmenting_path(c)[1]


def _lexicographic_refine(c: np.ndarray, optimum: float) -> list[int]:
    """Smallest prediction index per label, in label order, that keeps the optimum."""
    n_pred, n_label = c.shape
    tol = _tie_tolerance(c)
    chosen: list[int] = []
    fixed_cost = 0.0
    for j in range(n_label):
        rest_labels = np.arange(j + 1, n_label)
        for i in range(n_pred):
            if i in chosen:
                continue
            tail = 0.0
            if rest_labels.size:
                free_preds = np.array([p for p in range(n_pred) if p != i and p not in chosen])
                tail = _optimal_cost(c[np.ix_(free_preds, rest_labels)])
            if fixed_cost + c[i, j] + tail <= optimum + tol:
                chosen.append(i)
                fixed_cost += c[i, j]
                break
        else:  # pragma: no cover - the optimum is always reachable
            raise RuntimeError("lexicographic refinement lost the optimum")
    return chosen


def solve_lap(costs) -> Assignment:
    """Minimum-cost injective assignment of every label (column) to a prediction (row).

    Among equal-cost optima the pairing that is lexicographically smallest in
    label order (by prediction index) is returned.
    """
    c = check_cost_matrix(costs)
    _, optimum = _shortest_augmenting_path(c)
    chosen = _lexicographic_refine(c, optimum)
    pairs = tuple((i, j) for j, i in enumerate(chosen))
    return Assignment(pairs, float(sum(c[i, j] for i, j in pairs)))


def brute_force_lap(costs) -> Assignment:
    """Exhaustive reference solver for small matrices (rows <= 8)."""
    c = check_cost_matrix(costs)
    n_pred, n_label = c.shape
    if n_pred > BRUTE_FORCE_MAX_ROWS:
        raise DimensionError(f"brute force limited to {BRUTE_FORCE_MAX_ROWS} rows, got {n_pred}")
    cols = np.arange(n_label)
    # permutations() yields tuples in lexicographic order, which is exactly
    # the tie-break order.
    perms = list(itertools.permutations(range(n_pred), n_label))
    totals = [float(c[list(p), cols].sum()) for p in perms]
    best = min(totals)
    tol = _tie_tolerance(c)
    for p, total in zip(perms, totals):
        if total <= best + tol:
            pairs = tuple((i, j) for j, i in enumerate(p))
            return Assignment(pairs, total)
    raise AssertionError("unreachable")
