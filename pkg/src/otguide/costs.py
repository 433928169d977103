"""Task-specific ground costs and cost-matrix assembly."""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    ConvergenceError,
    CostMatrix,
    DegenerateInputError,
    DiscreteMeasure,
    MissingAttributeError,
    PointAttrs,
    StructuralError,
)
from .datagen import Image, rgb_to_lab

KINDS = ("sq_euclidean", "angle", "avg_color", "combined", "histogram_wasserstein")
BACKGROUND_LEVEL = 250
L_RANGE = (0.0, 100.0)
AB_RANGE = (-128.0, 127.0)
EXACT_INNER_MAX_BINS = 512


@dataclass(frozen=True)
class InnerSolver:
    method: str = "auto"  # auto | exact | sinkhorn
    epsilon: float | None = None

    def __post_init__(self):
        if self.method not in ("auto", "exact", "sinkhorn"):
            raise ValueError(f"inner solver method must be auto, exact or sinkhorn, got {self.method!r}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("inner solver epsilon must be positive")


@dataclass(frozen=True)
class CostSpec:
    kind: str = "sq_euclidean"
    angle_mode: str = "circular"
    lambda_color: float | None = None
    histogram_bins: int = 8
    inner_solver: InnerSolver = field(default_factory=InnerSolver)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.angle_mode not in ("linear", "circular"):
            raise ValueError(f"angle_mode must be 'linear' or 'circular', got {self.angle_mode!r}")
        if self.lambda_color is not None and not (math.isfinite(self.lambda_color) and self.lambda_color >= 0):
            raise ValueError(f"lambda_color must be finite and >= 0, got {self.lambda_color}")
        if self.kind == "combined" and self.lambda_color is None:
            raise ValueError("combined cost requires an explicit lambda_color")
        if self.histogram_bins < 2:
            raise ValueError(f"histogram_bins must be >= 2, got {self.histogram_bins}")

    @classmethod
    def from_json(cls, doc: dict) -> "CostSpec":
        if not isinstance(doc, dict):
            raise ValueError("cost spec must be a JSON object")
        unknown = set(doc) - {"kind", "angle_mode", "lambda_color", "bins", "inner"}
        if unknown:
            raise ValueError(f"unknown cost spec field(s): {', '.join(sorted(unknown))}")
        inner = doc.get("inner") or {}
        return cls(
            kind=doc.get("kind", "sq_euclidean"),
            angle_mode=doc.get("angle_mode", "circular"),
            lambda_color=None if doc.get("lambda_color") is None else float(doc["lambda_color"]),
            histogram_bins=int(doc.get("bins", 8)),
            inner_solver=InnerSolver(inner.get("method", "auto"), inner.get("epsilon")),
        )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "angle_mode": self.angle_mode,
            "lambda_color": self.lambda_color,
            "bins": self.histogram_bins,
            "inner": asdict(self.inner_solver),
        }

    @property
    def spec_id(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- pointwise costs ---------------------------------------------------------

def sq_euclidean(u, v) -> float:
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise StructuralError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    diff = u - v
    return float(diff @ diff)


def angle_cost(a: float, b: float, mode: str = "circular") -> float:
    """Squared azimuth difference in degrees squared."""
    for x in (a, b):
        if not 0.0 <= x < 360.0:
            raise ValueError(f"angle {x} outside [0, 360)")
    d = abs(a - b)
    if mode == "circular":
        d = min(d, 360.0 - d)
    elif mode != "linear":
        raise ValueError(f"unknown angle mode {mode!r}")
    return d * d


def mean_color(image: Image) -> np.ndarray:
    """Mean RGB over pixels that are not background (any channel below 250)."""
    px = image.pixels.reshape(-1, 3)
    keep = ~np.all(px >= BACKGROUND_LEVEL, axis=1)
    if not keep.any():
        raise DegenerateInputError("image contains only background pixels")
    return px[keep].astype(float).mean(axis=0)


def color_distance(c1, c2) -> float:
    d = np.asarray(c1, dtype=float) - np.asarray(c2, dtype=float)
    return float(np.sqrt(d @ d))


def avg_color_distance(img_a: Image, img_b: Image) -> float:
    return color_distance(mean_color(img_a), mean_color(img_b))


def combined_cost(x: PointAttrs, y: PointAttrs, lambda_color: float, angle_mode: str = "circular") -> float:
    for p in (x, y):
        if p.angle is None or p.color is None:
            raise MissingAttributeError(f"point {p.id} lacks the angle or colour attribute")
    return angle_cost(x.angle, y.angle, angle_mode) + lambda_color * color_distance(x.color, y.color)


# --- colour histograms -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LabHistogram:
    """Normalised pixel counts on a fixed ``bins**3`` CIELAB grid.

    Only occupied bins are stored: ``index`` holds their flat grid indices
    (ascending) and ``weights`` their masses.
    """

    bins: int
    index: np.ndarray
    weights: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return bin_centers(self.bins)[self.index]

    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.centers, self.weights)


def bin_centers(bins: int) -> np.ndarray:
    wl = (L_RANGE[1] - L_RANGE[0]) / bins
    wab = (AB_RANGE[1] - AB_RANGE[0]) / bins
    cl = L_RANGE[0] + wl * (np.arange(bins) + 0.5)
    cab = AB_RANGE[0] + wab * (np.arange(bins) + 0.5)
    grid = np.stack(np.meshgrid(cl, cab, cab, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def lab_bin_index(lab: np.ndarray, bins: int) -> np.ndarray:
    lab = np.atleast_2d(lab)
    wl = (L_RANGE[1] - L_RANGE[0]) / bins
    wab = (AB_RANGE[1] - AB_RANGE[0]) / bins
    il = np.clip(np.floor((lab[:, 0] - L_RANGE[0]) / wl), 0, bins - 1).astype(int)
    ia = np.clip(np.floor((lab[:, 1] - AB_RANGE[0]) / wab), 0, bins - 1).astype(int)
    ib = np.clip(np.floor((lab[:, 2] - AB_RANGE[0]) / wab), 0, bins - 1).astype(int)
    return (il * bins + ia) * bins + ib


def lab_histogram(image: Image, bins: int = 8) -> LabHistogram:
    px = image.pixels.reshape(-1, 3)
    if px.shape[0] == 0:
        raise DegenerateInputError("empty image")
    keep = ~np.all(px >= BACKGROUND_LEVEL, axis=1)
    if not keep.any():
        raise DegenerateInputError("image contains only background pixels")
    idx = lab_bin_index(rgb_to_lab(px[keep]), bins)
    occupied, counts = np.unique(idx, return_counts=True)
    return LabHistogram(bins, occupied, counts / counts.sum())


def histogram_wasserstein(h1: LabHistogram, h2: LabHistogram, inner: InnerSolver | None = None) -> float:
    """Transport cost between two histograms under Euclidean bin-centre distance."""
    from .solvers import SinkhornConfig, solve_exact, solve_sinkhorn

    if h1.bins != h2.bins:
        raise StructuralError(f"histograms use different grids ({h1.bins} vs {h2.bins} bins)")
    inner = inner or InnerSolver()
    c1, c2 = h1.centers, h2.centers
    ground = np.sqrt(((c1[:, None, :] - c2[None, :, :]) ** 2).sum(-1))
    cost = CostMatrix(ground)
    mu, nu = DiscreteMeasure(c1, h1.weights), DiscreteMeasure(c2, h2.weights)
    method = inner.method
    if method == "auto":
        method = "exact" if max(len(h1.index), len(h2.index)) <= EXACT_INNER_MAX_BINS else "sinkhorn"
    if method == "exact":
        return solve_exact(mu, nu, cost).objective
    eps = inner.epsilon if inner.epsilon is not None else 1e-2 * float(np.median(ground))
    res = solve_sinkhorn(mu, nu, cost, SinkhornConfig(max(eps, 1e-12)))
    if not res.converged:
        raise ConvergenceError(f"inner Sinkhorn did not converge in {res.iterations} iterations")
    return res.objective


class HistogramCache:
    """Histograms keyed by image id; safe for concurrent get/insert."""

    def __init__(self):
        self._data: dict[tuple[str, int], LabHistogram] = {}
        self._lock = threading.Lock()

    def get(self, image_id: str, image: Image, bins: int) -> LabHistogram:
        key = (image_id, bins)
        with self._lock:
            hit = self._data.get(key)
        if hit is not None:
            return hit
        h = lab_histogram(image, bins)
        with self._lock:
            return self._data.setdefault(key, h)

    def __len__(self):
        return len(self._data)


# --- cost matrices -----------------------------------------------------------

def _thread_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    try:
        return max(1, int(os.environ.get("OTGUIDE_THREADS", "1")))
    except ValueError:
        return 1


def _angles(m: DiscreteMeasure) -> np.ndarray:
    out = []
    for a in m.attrs:
        if a.angle is None:
            raise MissingAttributeError(f"point {a.id} has no angle attribute")
        out.append(a.angle)
    return np.asarray(out)


def _colors(m: DiscreteMeasure, images: dict[str, Image] | None) -> np.ndarray:
    out = []
    for a in m.attrs:
        if a.color is not None:
            out.append(a.color)
        elif images is not None and a.id in images:
            out.append(mean_color(images[a.id]))
        else:
            raise MissingAttributeError(f"point {a.id} has no colour attribute")
    return np.asarray(out, dtype=float)


def _angle_matrix(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    d = np.abs(a[:, None] - b[None, :])
    if mode == "circular":
        d = np.minimum(d, 360.0 - d)
    return d * d


def _color_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def cost_matrix(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    spec: CostSpec,
    *,
    images: dict[str, Image] | None = None,
    cache: HistogramCache | None = None,
    use_cache: bool = True,
    threads: int | None = None,
) -> CostMatrix:
    """Evaluate ``spec`` on every (source, target) pair.

    ``images`` maps point ids to images; it is required for the histogram
    cost and consulted for colour when a point has no colour attribute.
    Histogram rows are evaluated on up to ``threads`` workers (default:
    the ``OTGUIDE_THREADS`` environment variable, else 1).
    """
    if spec.kind == "sq_euclidean":
        if mu.dim != nu.dim:
            raise StructuralError(f"feature dimensions differ: {mu.dim} vs {nu.dim}")
        x, y = mu.points, nu.points
        return CostMatrix(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))
    if spec.kind == "angle":
        return CostMatrix(_angle_matrix(_angles(mu), _angles(nu), spec.angle_mode))
    if spec.kind == "avg_color":
        return CostMatrix(_color_matrix(_colors(mu, images), _colors(nu, images)))
    if spec.kind == "combined":
        angle = _angle_matrix(_angles(mu), _angles(nu), spec.angle_mode)
        color = _color_matrix(_colors(mu, images), _colors(nu, images))
        return CostMatrix(angle + spec.lambda_color * color)

    for m in (mu, nu):
        for pid in m.ids:
            if images is None or pid not in images:
                raise MissingAttributeError(f"point {pid} has no image for the histogram cost")
    bins = spec.histogram_bins
    if use_cache:
        cache = cache if cache is not None else HistogramCache()
        h_mu = [cache.get(pid, images[pid], bins) for pid in mu.ids]
        h_nu = [cache.get(pid, images[pid], bins) for pid in nu.ids]

        def row(i):
            return [histogram_wasserstein(h_mu[i], h, spec.inner_solver) for h in h_nu]
    else:
        def row(i):
            hi = lab_histogram(images[mu.ids[i]], bins)
            return [histogram_wasserstein(hi, lab_histogram(images[pid], bins), spec.inner_solver)
                    for pid in nu.ids]

    workers = _thread_count(threads)
    if workers == 1:
        rows = [row(i) for i in range(mu.n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, range(mu.n)))
    return CostMatrix(np.asarray(rows, dtype=float))
