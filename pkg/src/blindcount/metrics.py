"""Counting error metrics and constant-count baselines."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class CountPair:
    y: float
    y_hat: float
    image_id: str = ""
    class_index: int = 0


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    nae: float
    sre: float
    pair_count: int

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "nae": self.nae, "sre": self.sre,
                "pairs": self.pair_count}


def _arrays(pairs: Iterable) -> tuple[np.ndarray, np.ndarray]:
    ys, yh = [], []
    for p in pairs:
        if isinstance(p, CountPair):
            ys.append(p.y)
            yh.append(p.y_hat)
        else:
            ys.append(p[0])
            yh.append(p[1])
    return np.asarray(ys, dtype=np.float64), np.asarray(yh, dtype=np.float64)


def compute_metrics(pairs: Iterable) -> MetricReport:
    """MAE, RMSE, NAE and SRE averaged over every (image, class) pair.

    ``pairs`` holds ``CountPair`` objects or ``(y, y_hat)`` tuples. Every
    ground-truth count must be positive.
    """
    y, y_hat = _arrays(pairs)
    if y.size == 0:
        raise ValueError("no count pairs to evaluate")
    if np.any(y <= 0):
        raise ValueError("ground-truth counts must be positive")
    err = y - y_hat
    return MetricReport(
        mae=float(np.mean(np.abs(err))),
        rmse=math.sqrt(float(np.mean(err * err))),
        nae=float(np.mean(np.abs(err) / y)),
        sre=math.sqrt(float(np.mean(err * err / y))),
        pair_count=int(y.size),
    )


def baseline_predict(train_counts: Sequence[float], mode: str = "mean") -> float:
    counts = np.asarray(train_counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("no training counts")
    if mode == "mean":
        return float(counts.mean())
    if mode == "median":
        return float(np.median(counts))
    raise ValueError(f"unknown baseline mode {mode!r}")


def baseline_pairs(test_counts: Sequence[float], value: float) -> list[tuple[float, float]]:
    return [(float(y), value) for y in test_counts]


def write_report_json(path, reports: dict[str, MetricReport], extra: dict | None = None) -> None:
    payload = {name: r.to_dict() for name, r in reports.items()}
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def write_report_csv(path, reports: dict[str, MetricReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "mae", "rmse", "nae", "sre", "pairs"])
        for name, r in reports.items():
            writer.writerow([name, f"{r.mae:.6f}", f"{r.rmse:.6f}", f"{r.nae:.6f}",
                             f"{r.sre:.6f}", r.pair_count])


def pairs_to_records(pairs: Sequence[CountPair]) -> list[dict]:
    return [asdict(p) for p in pairs]
