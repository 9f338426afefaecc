"""Exemplar-free multi-class class-agnostic counting.

Multi-head density-map counter trained with a bipartite-matched L1 loss,
counting metrics, a procedural multi-class scene generator and post-hoc
example discovery.
"""

from .assignment import Assignment, brute_force_lap, solve_lap
from .densitymap import integrate, normalized_cost, pseudo_density
from .matching import PredictionSet, deployment_postprocess, match, matched_loss
from .metrics import MetricReport, compute_metrics

__version__ = "0.1.0"

__all__ = [
    "Assignment", "solve_lap", "brute_force_lap",
    "integrate", "pseudo_density", "normalized_cost",
    "PredictionSet", "match", "matched_loss", "deployment_postprocess",
    "MetricReport", "compute_metrics",
]
