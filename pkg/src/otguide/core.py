"""Discrete measures, couplings, cost matrices and the transport-cost functional."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WEIGHT_TOL = 1e-12
EXACT_MARGINAL_TOL = 1e-9
SINKHORN_MARGINAL_TOL = 1e-6


class OTGuideError(Exception):
    """Base class for errors raised by this package."""


class StructuralError(OTGuideError, ValueError):
    """Shapes or dimensions that do not fit together."""


class DegenerateInputError(OTGuideError, ValueError):
    """Input that is well-formed but carries no usable information."""


class MissingAttributeError(OTGuideError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConvergenceError(OTGuideError, RuntimeError):
    """A solver stopped without reaching its tolerance."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointAttrs:
    """Optional per-point attributes: azimuth in degrees, RGB colour, identifier."""

    id: str
    angle: float | None = None
    color: tuple[int, int, int] | None = None


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i weights[i] * delta(points[i])``."""

    points: np.ndarray
    weights: np.ndarray
    attrs: tuple[PointAttrs, ...] = field(default=())

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise StructuralError(f"points must be a non-empty n x d matrix, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise StructuralError("points contain non-finite coordinates")
        weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.shape[0] != points.shape[0]:
            raise StructuralError(f"{weights.shape[0]} weights for {points.shape[0]} points")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise StructuralError("weights must be finite and non-negative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise StructuralError(f"weights sum to {weights.sum()!r}, expected 1")
        attrs = tuple(self.attrs) if self.attrs else tuple(PointAttrs(id=str(i)) for i in range(len(weights)))
        if len(attrs) != points.shape[0]:
            raise StructuralError(f"{len(attrs)} attribute records for {points.shape[0]} points")
        for a in attrs:
            if a.angle is not None and not (0.0 <= a.angle < 360.0):
                raise StructuralError(f"point {a.id}: angle {a.angle} outside [0, 360)")
            if a.color is not None and (len(a.color) != 3 or not all(0 <= c <= 255 for c in a.color)):
                raise StructuralError(f"point {a.id}: colour {a.color} outside [0, 255]^3")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "attrs", attrs)

    @classmethod
    def uniform(cls, points, attrs: Sequence[PointAttrs] = ()) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=float)
        n = points.shape[0] if points.ndim else 0
        if n == 0:
            raise StructuralError("a measure needs at least one point")
        return cls(points, np.full(n, 1.0 / n), tuple(attrs))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.attrs]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.n) <= WEIGHT_TOL))


@dataclass(frozen=True, eq=False)
class CostMatrix:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2:
            raise StructuralError(f"cost matrix must be 2-d, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise StructuralError("cost matrix contains non-finite entries")
        if np.any(e < 0):
            raise StructuralError("cost matrix contains negative entries")
        object.__setattr__(self, "entries", _frozen(e))

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @property
    def T(self) -> "CostMatrix":
        return CostMatrix(self.entries.T)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling matrix together with the marginals it is meant to satisfy.

    Construction does not check feasibility; use :func:`validate_plan`.
    """

    coupling: np.ndarray
    source_marginal: np.ndarray
    target_marginal: np.ndarray
    marginal_tol: float = EXACT_MARGINAL_TOL

    def __post_init__(self):
        object.__setattr__(self, "coupling", _frozen(np.atleast_2d(self.coupling)))
        object.__setattr__(self, "source_marginal", _frozen(np.ravel(self.source_marginal)))
        object.__setattr__(self, "target_marginal", _frozen(np.ravel(self.target_marginal)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.coupling.shape

    @property
    def T(self) -> "TransportPlan":
        return TransportPlan(self.coupling.T, self.target_marginal, self.source_marginal, self.marginal_tol)

    def to_json(self, duals: tuple[np.ndarray, np.ndarray] | None = None, **extra) -> dict:
        n, m = self.shape
        doc = {"rows": n, "cols": m, "entries": self.coupling.tolist()}
        if duals is not None:
            doc["duals"] = {"f": np.asarray(duals[0]).tolist(), "g": np.asarray(duals[1]).tolist()}
        doc.update(extra)
        return doc

    @classmethod
    def from_json(cls, doc: dict, marginal_tol: float = EXACT_MARGINAL_TOL) -> "TransportPlan":
        entries = np.asarray(doc["entries"], dtype=float)
        if entries.shape != (doc["rows"], doc["cols"]):
            raise StructuralError(f"plan declares {doc['rows']}x{doc['cols']} but holds {entries.shape}")
        return cls(entries, entries.sum(axis=1), entries.sum(axis=0), marginal_tol)


@dataclass(frozen=True)
class ValidationReport:
    row_violation: float
    col_violation: float
    min_entry: float
    tol: float

    @property
    def valid(self) -> bool:
        return self.row_violation <= self.tol and self.col_violation <= self.tol and self.min_entry >= 0.0

    def __bool__(self):
        return self.valid


def validate_plan(plan: TransportPlan, tol: float | None = None) -> ValidationReport:
    """Measure how far ``plan`` is from the set of couplings of its marginals.

    Row and column violations are L1 distances between the plan's marginals
    and the stored ones.
    """
    tol = plan.marginal_tol if tol is None else tol
    n, m = plan.shape
    if plan.source_marginal.shape != (n,) or plan.target_marginal.shape != (m,):
        raise StructuralError(
            f"coupling is {n}x{m} but marginals have lengths "
            f"{plan.source_marginal.shape[0]} and {plan.target_marginal.shape[0]}"
        )
    p = plan.coupling
    return ValidationReport(
        row_violation=float(np.abs(p.sum(axis=1) - plan.source_marginal).sum()),
        col_violation=float(np.abs(p.sum(axis=0) - plan.target_marginal).sum()),
        min_entry=float(p.min()),
        tol=tol,
    )


def transport_cost(plan: TransportPlan, cost: CostMatrix) -> float:
    """Total cost ``sum_ij plan_ij * cost_ij``."""
    if plan.shape != cost.shape:
        raise StructuralError(f"plan is {plan.shape} but cost is {cost.shape}")
    return float(np.sum(plan.coupling * cost.entries))


# --- dataset files -----------------------------------------------------------

def _record(point: np.ndarray, weight: float | None, attrs: PointAttrs) -> dict:
    return {
        "id": attrs.id,
        "features": [float(x) for x in point],
        "angle": attrs.angle,
        "color": list(attrs.color) if attrs.color is not None else None,
        "weight": weight,
    }


def measure_records(measure: DiscreteMeasure) -> list[dict]:
    w = None if measure.is_uniform else measure.weights
    return [
        _record(measure.points[i], None if w is None else float(w[i]), measure.attrs[i])
        for i in range(measure.n)
    ]


def dump_measure(measure: DiscreteMeasure, path, header: dict | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines.extend(json.dumps(r, sort_keys=True) for r in measure_records(measure))
    Path(path).write_text("\n".join(lines) + "\n")


def measure_from_records(records: Iterable[dict]) -> DiscreteMeasure:
    points, weights, attrs = [], [], []
    for k, r in enumerate(records):
        if "header" in r:
            continue
        try:
            features = r["features"]
        except KeyError:
            raise StructuralError(f"record {k} has no 'features'") from None
        points.append([float(x) for x in features])
        weights.append(r.get("weight"))
        color = r.get("color")
        attrs.append(PointAttrs(
            id=str(r.get("id", len(attrs))),
            angle=None if r.get("angle") is None else float(r["angle"]),
            color=None if color is None else tuple(int(c) for c in color),
        ))
    if not points:
        raise StructuralError("dataset holds no points")
    if len({len(p) for p in points}) != 1:
        raise StructuralError("records have differing feature lengths")
    if all(w is None for w in weights):
        w = np.full(len(points), 1.0 / len(points))
    elif any(w is None for w in weights):
        raise StructuralError("either all records carry a weight or none do")
    else:
        w = np.asarray(weights, dtype=float)
    return DiscreteMeasure(np.asarray(points), w, tuple(attrs))


def load_measure(path) -> DiscreteMeasure:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise StructuralError(f"{path}:{lineno}: {exc.msg}") from None
    return measure_from_records(records)
