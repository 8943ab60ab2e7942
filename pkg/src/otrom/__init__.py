"""Optimal-transport reduced-order modeling toolkit."""

from otrom.measures import (
    CostMatrix,
    DiscreteMeasure,
    Field,
    GridGeometry,
    cost_matrix,
    normalize_field,
    second_moment,
    unit_grid,
)
from otrom.sinkhorn import (
    SinkhornParams,
    SinkhornSolution,
    entropic_barycenter,
    exact_ot_1d,
    exact_ot_bruteforce,
    sinkhorn_distance,
    sinkhorn_divergence,
    sinkhorn_plan,
)

__all__ = [
    "CostMatrix",
    "DiscreteMeasure",
    "Field",
    "GridGeometry",
    "cost_matrix",
    "normalize_field",
    "second_moment",
    "unit_grid",
    "SinkhornParams",
    "SinkhornSolution",
    "entropic_barycenter",
    "exact_ot_1d",
    "exact_ot_bruteforce",
    "sinkhorn_distance",
    "sinkhorn_divergence",
    "sinkhorn_plan",
]

__version__ = "0.1.0"
