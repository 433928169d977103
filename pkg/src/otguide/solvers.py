"""Exact and entropic solvers for discrete optimal transport.

``solve_exact`` is a transportation simplex on the bipartite spanning-tree
basis (the network simplex specialised to complete bipartite graphs).
``solve_sinkhorn`` runs Sinkhorn-Knopp scaling in the linear or log domain
and rounds the result onto the exact marginals.  ``brute_force_solve``
enumerates permutations and is only meant as a test oracle.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import (
    EXACT_MARGINAL_TOL,
    SINKHORN_MARGINAL_TOL,
    ConvergenceError,
    CostMatrix,
    DiscreteMeasure,
    StructuralError,
    TransportPlan,
    transport_cost,
)


class SinkhornOverflowError(ConvergenceError):
    pass


@dataclass(frozen=True, eq=False)
class SolveResult:
    plan: TransportPlan
    objective: float
    iterations: int
    converged: bool
    dual_potentials: tuple[np.ndarray, np.ndarray] | None = None


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float
    max_iter: int = 100_000
    tol: float = 1e-6
    log_domain: bool | None = None  # None: decide from epsilon / max cost

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


def _check(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: CostMatrix) -> np.ndarray:
    if cost.shape != (mu.n, nu.n):
        raise StructuralError(f"cost is {cost.shape} but measures have {mu.n} and {nu.n} points")
    return cost.entries


# --- transportation simplex --------------------------------------------------

class _SpanningTreeBasis:
    """Basis of the transportation LP as a spanning tree on rows + columns.

    Node ``i < n`` is row i, node ``n + j`` is column j.
    """

    def __init__(self, n: int, m: int):
        self.n, self.m = n, m
        self.adj: list[set[int]] = [set() for _ in range(n + m)]
        self.flow: dict[tuple[int, int], float] = {}

    def add(self, i: int, j: int, x: float) -> None:
        self.flow[(i, j)] = x
        self.adj[i].add(self.n + j)
        self.adj[self.n + j].add(i)

    def remove(self, i: int, j: int) -> None:
        del self.flow[(i, j)]
        self.adj[i].discard(self.n + j)
        self.adj[self.n + j].discard(i)

    def cell(self, a: int, b: int) -> tuple[int, int]:
        return (a, b - self.n) if a < self.n else (b, a - self.n)

    def potentials(self, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        pot = np.zeros(n + self.m)
        seen = np.zeros(n + self.m, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            a = queue.popleft()
            for b in self.adj[a]:
                if not seen[b]:
                    seen[b] = True
                    i, j = self.cell(a, b)
                    pot[b] = C[i, j] - pot[a]
                    queue.append(b)
        if not seen.all():
            raise RuntimeError("basis is not a spanning tree")
        return pot[:n], pot[n:]

    def path(self, start: int, goal: int) -> list[int]:
        parent = {start: -1}
        queue = deque([start])
        while queue:
            a = queue.popleft()
            if a == goal:
                break
            for b in self.adj[a]:
                if b not in parent:
                    parent[b] = a
                    queue.append(b)
        out = [goal]
        while out[-1] != start:
            out.append(parent[out[-1]])
        return out[::-1]

    def flows_for(self, supply: np.ndarray, demand: np.ndarray) -> np.ndarray:
        """Basic flows meeting ``supply``/``demand``, by peeling tree leaves."""
        n, m = self.n, self.m
        residual = np.concatenate([supply, demand]).astype(float)
        degree = np.array([len(s) for s in self.adj])
        adj = [set(s) for s in self.adj]
        x = np.zeros((n, m))
        leaves = deque(k for k in range(n + m) if degree[k] == 1)
        while leaves:
            a = leaves.popleft()
            if degree[a] != 1:
                continue
            (b,) = adj[a]
            i, j = self.cell(a, b)
            x[i, j] = residual[a]
            residual[b] -= residual[a]
            residual[a] = 0.0
            adj[a].discard(b)
            adj[b].discard(a)
            degree[a] -= 1
            degree[b] -= 1
            if degree[b] == 1:
                leaves.append(b)
        return x


def _northwest_corner(basis: _SpanningTreeBasis, supply: np.ndarray, demand: np.ndarray) -> None:
    s, d = supply.copy(), demand.copy()
    i = j = 0
    n, m = basis.n, basis.m
    while True:
        x = min(s[i], d[j])
        basis.add(i, j, x)
        s[i] -= x
        d[j] -= x
        if i == n - 1 and j == m - 1:
            return
        if j == m - 1 or (i < n - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1


def solve_exact(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostMatrix,
    *,
    perturbation: float = 1e-12,
    max_pivots: int | None = None,
) -> SolveResult:
    """Optimal plan by the transportation simplex.

    Degeneracy is removed by perturbing every supply by ``perturbation`` (and
    the last demand by ``n * perturbation``); flows are recomputed on the
    final basis with the unperturbed marginals.  The returned dual potentials
    ``(f, g)`` satisfy ``f_i + g_j = C_ij`` on the basis and certify optimality.

    Raises
    ------
    ConvergenceError
        If the pivot count exceeds ``50 * (n + m)**2``.
    """
    C = _check(mu, nu, cost)
    n, m = C.shape
    a, b = mu.weights, nu.weights
    supply = a + perturbation
    demand = b.copy()
    demand[-1] += n * perturbation

    basis = _SpanningTreeBasis(n, m)
    _northwest_corner(basis, supply, demand)

    cap = 50 * (n + m) ** 2 if max_pivots is None else max_pivots
    enter_tol = 1e-11 * max(1.0, float(C.max()))
    block = max(1, int(math.ceil(math.sqrt(n))))
    n_blocks = int(math.ceil(n / block))
    cursor = 0
    pivots = 0
    f, g = basis.potentials(C)
    while True:
        entering = None
        for k in range(n_blocks):
            lo = ((cursor + k) % n_blocks) * block
            reduced = C[lo:lo + block] - f[lo:lo + block, None] - g[None, :]
            flat = int(np.argmin(reduced))
            if reduced.flat[flat] < -enter_tol:
                entering = (lo + flat // m, flat % m)
                cursor = (cursor + k) % n_blocks
                break
        if entering is None:
            break
        if pivots >= cap:
            raise ConvergenceError(f"network simplex exceeded {cap} pivots (cycling safeguard)")
        pivots += 1

        i, j = entering
        nodes = basis.path(i, n + j)
        edges = [basis.cell(nodes[k], nodes[k + 1]) for k in range(len(nodes) - 1)]
        minus, plus = edges[0::2], edges[1::2]
        leaving = min(minus, key=lambda e: basis.flow[e])
        theta = basis.flow[leaving]
        for e in minus:
            basis.flow[e] -= theta
        for e in plus:
            basis.flow[e] += theta
        basis.remove(*leaving)
        basis.add(i, j, theta)
        f, g = basis.potentials(C)

    x = basis.flows_for(a, b)
    np.clip(x, 0.0, None, out=x)
    plan = TransportPlan(x, a, b, EXACT_MARGINAL_TOL)
    return SolveResult(plan, transport_cost(plan, cost), pivots, True, (f, g))


# --- Sinkhorn ----------------------------------------------------------------

def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    out = np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True)) + zmax
    return np.squeeze(out, axis=axis)


def round_to_marginals(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a nonnegative matrix onto the couplings of ``a`` and ``b``.

    Rows and then columns are scaled down to feasibility and the remaining
    mass is restored by a rank-one correction (Altschuler, Weed & Rigollet).
    """
    P = np.array(P, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(P.sum(1) > 0, np.minimum(a / P.sum(1), 1.0), 0.0)
    P *= r[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(P.sum(0) > 0, np.minimum(b / P.sum(0), 1.0), 0.0)
    P *= c[None, :]
    # the residuals are non-negative up to rounding; clip so the correction
    # cannot push an entry below zero
    err_r = np.maximum(a - P.sum(1), 0.0)
    err_c = np.maximum(b - P.sum(0), 0.0)
    mass = err_r.sum()
    if mass > 0:
        P += np.outer(err_r, err_c) / mass
    return P


def solve_sinkhorn(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostMatrix,
    config: SinkhornConfig,
) -> SolveResult:
    """Entropic plan ``diag(u) exp(-C/eps) diag(v)``, rounded to exact marginals.

    ``converged`` is set once the L1 row-marginal violation of the scaled
    iterate (columns are exact after each sweep) falls below ``config.tol``.
    When ``max_iter`` runs out the best iterate seen is returned with
    ``converged=False``.  The returned potentials are ``eps * log`` scalings.
    """
    C = _check(mu, nu, cost)
    a, b = mu.weights, nu.weights
    eps = config.epsilon
    cmax = float(C.max())
    log_domain = config.log_domain
    if log_domain is None:
        log_domain = eps < 1e-2 * cmax

    best = (math.inf, None, None)
    converged = False
    it = 0
    if log_domain:
        with np.errstate(divide="ignore"):
            log_a, log_b = np.log(a), np.log(b)
        f = np.zeros_like(a)
        g = np.zeros_like(b)
        # warm start along a geometric epsilon schedule; these sweeps count
        # against max_iter, leaving at least one sweep at the target epsilon
        e = max(cmax, eps)
        warm = 0
        budget = config.max_iter - 1
        while e > eps and warm < budget:
            e = max(e / 2.0, eps)
            if e == eps:
                break
            for _ in range(min(10, budget - warm)):
                warm += 1
                f = e * (log_a - _logsumexp((g[None, :] - C) / e, axis=1))
                g = e * (log_b - _logsumexp((f[:, None] - C) / e, axis=0))
        for it in range(1, config.max_iter - warm + 1):
            f = eps * (log_a - _logsumexp((g[None, :] - C) / eps, axis=1))
            g = eps * (log_b - _logsumexp((f[:, None] - C) / eps, axis=0))
            P = np.exp((f[:, None] + g[None, :] - C) / eps)
            err = float(np.abs(P.sum(1) - a).sum())
            if err < best[0]:
                best = (err, P, (f.copy(), g.copy()))
            if err <= config.tol:
                converged = True
                break
        it += warm
    else:
        K = np.exp(-C / eps)
        if not np.all(K > 0):
            raise SinkhornOverflowError(
                f"exp(-C/eps) underflows at eps={eps:g}; retry with log_domain=True"
            )
        u = np.ones_like(a)
        v = np.ones_like(b)
        with np.errstate(over="raise", divide="raise", invalid="raise"):
            try:
                for it in range(1, config.max_iter + 1):
                    u = a / (K @ v)
                    v = b / (K.T @ u)
                    P = u[:, None] * K * v[None, :]
                    err = float(np.abs(P.sum(1) - a).sum())
                    if err < best[0]:
                        best = (err, P, (u.copy(), v.copy()))
                    if err <= config.tol:
                        converged = True
                        break
            except FloatingPointError as exc:
                raise SinkhornOverflowError(
                    f"linear-domain Sinkhorn hit {exc} at iteration {it}; retry with log_domain=True"
                ) from None
        with np.errstate(divide="ignore"):
            best = (best[0], best[1], (eps * np.log(best[2][0]), eps * np.log(best[2][1])))

    P = round_to_marginals(best[1], a, b)
    plan = TransportPlan(P, a, b, SINKHORN_MARGINAL_TOL)
    return SolveResult(plan, transport_cost(plan, cost), it, converged, best[2])


# --- brute force -------------------------------------------------------------

def brute_force_solve(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: CostMatrix) -> SolveResult:
    """Cheapest permutation plan, ties going to the lexicographically smallest.

    Valid for equal-size uniform measures, where some permutation matrix is
    always optimal (Birkhoff-von Neumann).  Limited to ``n <= 8``.
    """
    C = _check(mu, nu, cost)
    n = mu.n
    if nu.n != n or not (mu.is_uniform and nu.is_uniform):
        raise StructuralError("brute force needs uniform measures of equal size")
    if n > 8:
        raise StructuralError(f"brute force limited to n <= 8, got {n}")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    totals = C[np.arange(n), perms].sum(axis=1)
    lowest = totals.min()
    k = int(np.flatnonzero(totals <= lowest + 1e-12 * (1.0 + abs(lowest)))[0])
    P = np.zeros((n, n))
    P[np.arange(n), perms[k]] = 1.0 / n
    plan = TransportPlan(P, mu.weights, nu.weights, EXACT_MARGINAL_TOL)
    return SolveResult(plan, transport_cost(plan, cost), len(perms), True, None)
