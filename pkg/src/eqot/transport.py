"""Classical optimal transport on reduced equilibrium coordinates.

Backends
--------
exact
    Minimum-cost assignment for equal-weight clouds of equal size. The
    permutation comes from :func:`scipy.optimize.linear_sum_assignment`; the
    dual potentials certifying it are recovered independently here by
    shortest paths on the residual graph.
monotone
    Quantile coupling for p = 1, optimal for any strictly convex cost of the
    displacement.
entropic
    Log-domain Sinkhorn iterations with epsilon scaling.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .costs import ReducedCost, convexity_certificate, reduced_quadratic
from .errors import ConvergenceError, DimensionError, NotStrictlyConvexError
from .linsys import embed
from .measures import DiscreteMeasure, discretize, write_cloud_csv

log = logging.getLogger(__name__)

PERMUTATION = "permutation"
COUPLING = "coupling"


@dataclass(frozen=True, eq=False)
class TransportProblem:
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    cost: Union[ReducedCost, Callable]

    def __post_init__(self):
        if self.mu.p != self.nu.p:
            raise DimensionError("source and target measures must share dimension p")

    def cost_matrix(self):
        if isinstance(self.cost, ReducedCost):
            return self.cost.cost_matrix(self.mu.points, self.nu.points)
        X, Y = self.mu.points, self.nu.points
        return np.asarray(self.cost(X[:, None, :], Y[None, :, :]), dtype=float)


@dataclass
class SolverParams:
    """Knobs for the transport backends.

    ``epsilon_final`` is the final entropic temperature in cost units; when
    ``None`` it is ``epsilon_rel`` times the largest cost-matrix entry.
    """

    epsilon_final: Optional[float] = None
    epsilon_rel: float = 1e-3
    epsilon_decay: float = 0.5
    max_iterations: int = 50000
    marginal_tolerance: float = 1e-7
    backend: str = "auto"
    exact_cap: int = 2048

    def __post_init__(self):
        if self.epsilon_final is not None and not self.epsilon_final > 0:
            raise ValueError("epsilon_final must be positive")
        if not self.epsilon_rel > 0:
            raise ValueError("epsilon_rel must be positive")
        if not 0 < self.epsilon_decay < 1:
            raise ValueError("epsilon_decay must lie in (0, 1)")
        if self.max_iterations < 1 or not self.marginal_tolerance > 0:
            raise ValueError("max_iterations and marginal_tolerance must be positive")
        if self.backend not in ("auto", "exact", "entropic", "monotone"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass(eq=False)
class TransportSolution:
    mode: str
    total_cost: float
    backend: str
    permutation: Optional[np.ndarray] = None
    coupling: Optional[np.ndarray] = None
    potentials: Optional[tuple] = None
    marginal_residuals: tuple = (0.0, 0.0)
    duality_gap: Optional[float] = None
    iterations: int = 0
    epsilon: Optional[float] = None
    info: dict = field(default_factory=dict)

    def plan(self, mu_weights=None):
        """Dense coupling matrix (built from the permutation when needed)."""
        if self.coupling is not None:
            return self.coupling
        n = self.permutation.size
        w = np.full(n, 1.0 / n) if mu_weights is None else mu_weights
        P = np.zeros((n, n))
        P[np.arange(n), self.permutation] = w
        return P

    def summary(self):
        out = {
            "backend": self.backend,
            "mode": self.mode,
            "total_cost": float(self.total_cost),
            "marginal_residuals": [float(r) for r in self.marginal_residuals],
            "duality_gap": None if self.duality_gap is None else float(self.duality_gap),
            "iterations": int(self.iterations),
            "epsilon": None if self.epsilon is None else float(self.epsilon),
        }
        out.update(self.info)
        return out


def _tie_break(C):
    # Sub-tolerance perturbation favouring small columns for early rows, so equal-cost
    # matchings resolve to the lexicographically smaller permutation. Relative to max|C|
    # so that positive rescaling of C does not change the argmin.
    n, m = C.shape
    scale = np.abs(C).max(initial=0.0)
    delta = 1e-13 * (scale if scale > 0 else 1.0) / max(n * m, 1)
    rows = (n - np.arange(n))[:, None].astype(float)
    cols = np.arange(m)[None, :].astype(float)
    return C + delta * rows * cols


def _bellman_ford(n, src, dst, w, tol, v=None):
    # Vectorized relaxation over an edge list starting from potentials ``v``.
    # Improvements below ``tol`` are ignored so float round-off on zero cycles
    # cannot loop forever.
    order = np.argsort(dst, kind="stable")
    src, dst, w = src[order], dst[order], w[order]
    heads, starts = np.unique(dst, return_index=True)
    v = np.zeros(n) if v is None else v.copy()
    for rounds in range(1, n + 2):
        best = np.minimum.reduceat(v[src] + w, starts)
        better = best < v[heads] - tol
        if not better.any():
            return v, rounds
        v[heads[better]] = best[better]
    raise ConvergenceError("assignment is not optimal: negative cycle in residual graph", iterations=n + 1)


def _row_candidates(R, k):
    k = min(k, R.shape[1] - 1)
    if k <= 0:
        return np.repeat(np.arange(R.shape[0]), R.shape[1]), np.tile(np.arange(R.shape[1]), R.shape[0])
    cols = np.argpartition(R, k, axis=1)[:, : k + 1]
    return np.repeat(np.arange(R.shape[0]), k + 1), cols.ravel()


def _certify(C, perm, rows, cols, tol, v0=None, max_passes=50):
    """Duals for ``perm`` on candidate edges, grown until every dense edge is feasible."""
    n = C.shape[0]
    idx = np.arange(n)
    rows, cols = np.asarray(rows), np.asarray(cols)
    total = 0
    for passes in range(1, max_passes + 1):
        matched = C[idx, perm]
        # edge perm[i] -> j has length C[i, j] - C[i, perm[i]]
        w = C[rows, cols] - matched[rows]
        v, rounds = _bellman_ford(n, perm[rows], cols, w, tol, v0)
        total += rounds
        u = matched - v[perm]
        slack = C - u[:, None] - v[None, :]
        viol = slack < -tol
        count = np.count_nonzero(viol)
        if count == 0:
            return u, v, total, passes
        if count <= 32 * n:
            add_r, add_c = np.nonzero(viol)
        else:
            bad_j = np.flatnonzero(viol.any(axis=0))
            add_r, add_c = slack[:, bad_j].argmin(axis=0), bad_j
        del slack, viol
        rows, cols = np.concatenate([rows, add_r]), np.concatenate([cols, add_c])
        v0 = v
    raise ConvergenceError("dual certificate did not settle", iterations=total)


def assignment_duals(C, perm, tol=None, k=16, v0=None):
    """Dual potentials ``(u, v)`` certifying an assignment.

    Column potentials are shortest-path distances in the graph with an edge
    ``perm[i] -> j`` of length ``C[i, j] - C[i, perm[i]]``, started from a
    virtual source with edge lengths ``v0`` (zero by default); this graph has no
    negative cycle exactly when ``perm`` is optimal. A ``v0`` close to feasible
    potentials shortens the relaxation but does not change feasibility.
    Paths are solved on each row's ``k`` cheapest edges, then any edge the
    potentials violate is added and the paths re-solved, so the final
    potentials are feasible for the full matrix.

    Returns ``(u, v, rounds)`` with ``u[i] = C[i, perm[i]] - v[perm[i]]``.

    Raises
    ------
    ConvergenceError
        If the graph has a negative cycle, i.e. ``perm`` is not optimal.
    """
    C = np.asarray(C, dtype=float)
    perm = np.asarray(perm)
    tol = 1e-12 * max(np.abs(C).max(initial=0.0), 1.0) if tol is None else tol
    # candidate edges: cheapest per row after column potentials (row shifts don't matter)
    rows, cols = _row_candidates(C if v0 is None else C - v0[None, :], k)
    u, v, rounds, _ = _certify(C, perm, rows, cols, tol, v0)
    return u, v, rounds


def _multilevel(C, tol, base):
    # Exact permutation plus duals. Above ``base`` rows a strided quarter-size
    # subproblem is solved first; its column duals, extended by c-transforms,
    # reduce C so the augmenting-path solver and the certificate start close to
    # optimal. Reduction by row and column constants leaves the argmin unchanged.
    n = C.shape[0]
    if n <= base:
        _, perm = linear_sum_assignment(C)
        u, v, rounds = assignment_duals(C, perm, tol)
        return perm, u, v, rounds
    S = np.unique(np.linspace(0, n - 1, max(n // 4, base)).round().astype(int))
    _, _, vs, _ = _multilevel(C[np.ix_(S, S)], tol, base)
    u0 = (C[:, S] - vs[None, :]).min(axis=1)
    v0 = (C - u0[:, None]).min(axis=0)
    _, perm = linear_sum_assignment(C - u0[:, None] - v0[None, :])
    u, v, rounds = assignment_duals(C, perm, tol, v0=v0)
    return perm, u, v, rounds


def exact_assignment(cost_matrix, tie_break=True, base=256):
    """Minimum-cost permutation of a square cost matrix with a dual certificate.

    Costs are averaged with equal weights ``1/n``; the returned potentials
    satisfy ``C[i, j] >= u[i] + v[j]`` (to round-off) with equality on the
    matching. Problems above ``base`` rows are warm-started from a coarse
    subproblem; the result is exact either way.
    """
    C = np.asarray(cost_matrix, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"exact assignment needs a square cost matrix, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise DimensionError("cost matrix has non-finite entries")
    n = C.shape[0]
    work = _tie_break(C) if tie_break else C
    tol = 1e-12 * max(np.abs(C).max(initial=0.0), 1.0)
    perm, u, v, rounds = _multilevel(work, tol, base)
    primal = float(C[np.arange(n), perm].mean())
    dual = float((u.sum() + v.sum()) / n)
    slack = float((C - u[:, None] - v[None, :]).min())
    info = {"min_reduced_cost": slack, "dual_rounds": int(rounds)}
    return TransportSolution(
        mode=PERMUTATION,
        total_cost=primal,
        backend="exact",
        permutation=perm,
        potentials=(u, v),
        duality_gap=primal - dual,
        info=info,
    )


def monotone_1d(mu, nu, rc):
    """Quantile (north-west corner) coupling of two measures on the line."""
    if mu.p != 1 or nu.p != 1:
        raise DimensionError("monotone rearrangement requires p = 1")
    if isinstance(rc, ReducedCost) and not convexity_certificate(rc) > 0:
        raise NotStrictlyConvexError("monotone rearrangement needs a strictly convex cost")
    x, y = mu.points[:, 0], nu.points[:, 0]
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    n, m = ix.size, iy.size
    cu = np.cumsum(mu.weights[ix])
    cv = np.cumsum(nu.weights[iy])
    cu[-1] = cv[-1] = 1.0
    # quantile levels where either cumulative distribution jumps
    q = np.unique(np.concatenate([[0.0], cu, cv]))
    mid = 0.5 * (q[1:] + q[:-1])
    si = np.minimum(np.searchsorted(cu, mid), n - 1)
    sj = np.minimum(np.searchsorted(cv, mid), m - 1)
    entries = zip(si, sj, np.diff(q))
    P = np.zeros((n, m))
    Ms = float(rc.M[0, 0]) if isinstance(rc, ReducedCost) else None

    def c(xi, yj):
        return Ms * (xi - yj) ** 2 if Ms is not None else float(rc(np.array([xi]), np.array([yj])))

    f = np.full(n, np.nan)
    g = np.full(m, np.nan)
    total = 0.0
    prev_j = None
    for si, sj, t in entries:
        oi, oj = ix[si], iy[sj]
        P[oi, oj] += t
        cij = c(x[oi], y[oj])
        total += t * cij
        if np.isnan(f[oi]) and np.isnan(g[oj]):
            # staircase broke (both quantiles jumped together): link through the
            # previous column as a zero-mass basic cell
            f[oi] = 0.0 if prev_j is None else c(x[oi], y[prev_j]) - g[prev_j]
        if np.isnan(g[oj]):
            g[oj] = cij - f[oi]
        elif np.isnan(f[oi]):
            f[oi] = cij - g[oj]
        prev_j = oj
    res = (float(np.abs(P.sum(1) - mu.weights).sum()), float(np.abs(P.sum(0) - nu.weights).sum()))
    perm = None
    mode = COUPLING
    if n == m and mu.equal_weights and nu.equal_weights:
        perm = np.empty(n, dtype=int)
        perm[ix] = iy
        mode = PERMUTATION
    return TransportSolution(
        mode=mode,
        total_cost=float(total),
        backend="monotone",
        permutation=perm,
        coupling=P,
        potentials=(f, g),
        marginal_residuals=res,
    )


def sinkhorn(problem, params=None, cost_matrix=None):
    """Entropic transport by log-domain Sinkhorn with epsilon scaling.

    Starts at ``0.1 * max(C)`` and multiplies the temperature by
    ``params.epsilon_decay`` until it reaches the final value, then iterates
    until the L1 marginal residuals fall below ``params.marginal_tolerance``.
    The reported ``total_cost`` is the plan cost <P, C> without the entropy
    term.
    """
    params = params or SolverParams()
    mu, nu = problem.mu, problem.nu
    if np.any(mu.weights <= 0) or np.any(nu.weights <= 0):
        raise ValueError("entropic solver needs strictly positive weights")
    C = problem.cost_matrix() if cost_matrix is None else cost_matrix
    loga, logb = np.log(mu.weights), np.log(nu.weights)
    cmax = float(C.max())
    eps_final = params.epsilon_final if params.epsilon_final is not None else params.epsilon_rel * cmax
    if eps_final <= 0:
        eps_final = params.epsilon_rel
    eps = max(0.1 * cmax, eps_final)
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])

    def softmin(K, pot, logw, axis):
        # -log sum exp(pot + logw + K) along axis, max-shifted for stability
        Z = K + (pot + logw)[:, None] if axis == 0 else K + (pot + logw)[None, :]
        zmax = Z.max(axis=axis)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        sh = Z - (zmax[None, :] if axis == 0 else zmax[:, None])
        np.exp(sh, out=sh)
        return -(zmax + np.log(sh.sum(axis=axis)))

    def update(f, g, eps, K):
        g = eps * softmin(K, f / eps, loga, 0)
        f = eps * softmin(K, g / eps, logb, 1)
        return f, g

    def residuals(f, g, eps):
        logP = (f[:, None] + g[None, :] - C) / eps + loga[:, None] + logb[None, :]
        P = np.exp(logP)
        return P, float(np.abs(P.sum(1) - mu.weights).sum()), float(np.abs(P.sum(0) - nu.weights).sum())

    it = 0
    while eps > eps_final:
        K = -C / eps
        for _ in range(10):
            f, g = update(f, g, eps, K)
            it += 1
        if it >= params.max_iterations:
            _, r_row, r_col = residuals(f, g, eps)
            raise ConvergenceError(
                f"sinkhorn exhausted {it} iterations while annealing (eps={eps:.3e})",
                residuals=(r_row, r_col),
                iterations=it,
            )
        eps = max(eps * params.epsilon_decay, eps_final)
    check = 10
    K = -C / eps
    while True:
        for _ in range(check):
            f, g = update(f, g, eps, K)
            it += 1
        P, r_row, r_col = residuals(f, g, eps)
        if max(r_row, r_col) <= params.marginal_tolerance:
            break
        if it >= params.max_iterations:
            raise ConvergenceError(
                f"sinkhorn did not converge in {it} iterations (residuals {r_row:.2e}, {r_col:.2e})",
                residuals=(r_row, r_col),
                iterations=it,
            )
    cost = float(np.sum(P * C))
    dual = float(f @ mu.weights + g @ nu.weights)
    log.debug("sinkhorn: %d iterations, eps=%.3e, cost=%.6g", it, eps, cost)
    return TransportSolution(
        mode=COUPLING,
        total_cost=cost,
        backend="entropic",
        coupling=P,
        potentials=(f, g),
        marginal_residuals=(r_row, r_col),
        duality_gap=cost - dual,
        iterations=it,
        epsilon=eps,
    )


def barycentric_map(sol, nu, mu_weights=None):
    """Map samples T(x_i): matched targets, or coupling-weighted target means."""
    if sol.permutation is not None:
        return nu.points[sol.permutation]
    P = sol.coupling
    mass = P.sum(axis=1) if mu_weights is None else np.asarray(mu_weights, dtype=float)
    if np.any(mass <= 0):
        raise ValueError("coupling has a zero-mass row")
    return (P @ nu.points) / mass[:, None]


@dataclass(eq=False)
class TransportResult:
    """Solution of the equilibrium transport pipeline."""

    solution: TransportSolution
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    reduced_cost: ReducedCost
    map_points: np.ndarray
    src_states: np.ndarray
    dst_states: np.ndarray
    wall_time: float = 0.0

    @property
    def backend(self):
        return self.solution.backend

    def write_map_csv(self, path):
        with open(path, "w", newline="") as fh:
            write_cloud_csv(fh, self.mu.weights, [self.mu.points, self.map_points], ["src", "dst"])

    def summary(self):
        out = self.solution.summary()
        out["n_source"] = int(self.mu.n)
        out["n_target"] = int(self.nu.n)
        out["reduced_cost_matrix"] = self.reduced_cost.M.tolist()
        return out

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def choose_backend(mu, nu, params):
    if params.backend != "auto":
        return params.backend
    if mu.n == nu.n and mu.n <= params.exact_cap and mu.equal_weights and nu.equal_weights:
        return "exact"
    return "entropic"


def solve_reduced(mu, nu, rc, params=None):
    """Solve the reduced problem with the configured or automatic backend."""
    params = params or SolverParams()
    backend = choose_backend(mu, nu, params)
    if backend == "monotone":
        return monotone_1d(mu, nu, rc)
    problem = TransportProblem(mu, nu, rc)
    C = problem.cost_matrix()
    if backend == "exact":
        if mu.n != nu.n or not (mu.equal_weights and nu.equal_weights):
            raise DimensionError("exact backend needs equal-size equal-weight measures")
        return exact_assignment(C)
    return sinkhorn(problem, params, cost_matrix=C)


def solve_transport(cm, es, mu_spec, nu_spec, params=None, n=256, seed=0, mode="montecarlo", rc=None):
    """Transport between two equilibrium measures of the system behind ``cm``.

    Reduces the control cost to its quadratic form on E, discretizes both
    measures in reduced coordinates, solves the classical problem there and
    embeds the matched endpoints back into state space.

    Raises
    ------
    NotStrictlyConvexError
        Before any solving, if the reduced cost is not strictly convex.
    """
    t0 = time.perf_counter()
    params = params or SolverParams()
    rc = reduced_quadratic(cm, es) if rc is None else rc
    if not convexity_certificate(rc) > 0:
        raise NotStrictlyConvexError("reduced cost not strictly convex")
    if mu_spec.p != es.p or nu_spec.p != es.p:
        raise DimensionError(f"measures must live on the {es.p}-dimensional equilibrium set")
    mu = discretize(mu_spec, n, mode, seed)
    nu = discretize(nu_spec, n, mode, seed)
    sol = solve_reduced(mu, nu, rc, params)
    T = barycentric_map(sol, nu, mu.weights)
    return TransportResult(
        solution=sol,
        mu=mu,
        nu=nu,
        reduced_cost=rc,
        map_points=T,
        src_states=embed(es, mu.points),
        dst_states=embed(es, T),
        wall_time=time.perf_counter() - t0,
    )
