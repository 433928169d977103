"""Optimal-transport guidance for cycle-consistent mapping learners."""

__version__ = "0.1.0"

from .core import (
    CostMatrix,
    DiscreteMeasure,
    PointAttrs,
    TransportPlan,
    transport_cost,
    validate_plan,
)
from .costs import CostSpec, cost_matrix
from .mapping import ReferenceMap, barycentric_projection, mismatching_degree, reference_map
from .solvers import SinkhornConfig, brute_force_solve, solve_exact, solve_sinkhorn

__all__ = [
    "CostMatrix",
    "CostSpec",
    "DiscreteMeasure",
    "PointAttrs",
    "ReferenceMap",
    "SinkhornConfig",
    "TransportPlan",
    "barycentric_projection",
    "brute_force_solve",
    "cost_matrix",
    "mismatching_degree",
    "reference_map",
    "solve_exact",
    "solve_sinkhorn",
    "transport_cost",
    "validate_plan",
]
