"""Transport costs induced by optimal control of an LTI system.

Two running costs are supported:

* ``min_energy``: L(x, u) = |u|^2, evaluated in closed form through the
  Gramian, c(x, y) = (y - e^A x)^T W^{-1} (y - e^A x).
* ``lq``: L(x, u) = x^T Q x + u^T Ru u, evaluated by integrating the running
  cost along the Hamiltonian state/costate flow.

On the equilibrium set both reduce to a quadratic form in the reduced
displacement, h(w) = w^T M w, and this module extracts that form and probes
the structural properties (translation invariance, strict convexity) that the
transport step relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Optional

import numpy as np

from .errors import (
    DimensionError,
    NotEndpointQuadraticError,
    NotStrictlyConvexError,
    SteeringFailureError,
)
from .linsys import EquilibriumSpace, Gramian, LTISystem, embed, expm, gauss_legendre, gramian

MIN_ENERGY = "min_energy"
LQ = "lq"


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class RunningCostSpec:
    """Quadratic running cost ``L(x, u) = x^T Q x + u^T Ru u``.

    ``theta`` and ``lam`` (coercivity and strong-convexity constants) are
    carried as metadata only.
    """

    kind: Literal["min_energy", "lq"] = MIN_ENERGY
    Q: Optional[np.ndarray] = None
    Ru: Optional[np.ndarray] = None
    theta: Optional[float] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (MIN_ENERGY, LQ):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        for name in ("Q", "Ru"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.atleast_2d(np.asarray(val, dtype=float)).copy()
            if arr.shape[0] != arr.shape[1] or not np.all(np.isfinite(arr)):
                raise DimensionError(f"{name} must be a finite square matrix")
            if np.abs(arr - arr.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(arr).max()):
                raise ValueError(f"{name} must be symmetric")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.kind == MIN_ENERGY and self.Q is not None and np.any(self.Q != 0):
            raise ValueError("min_energy cost has no state weight; use kind='lq'")
        if self.Q is not None:
            ev = np.linalg.eigvalsh(self.Q)
            if ev[0] < -1e-12 * max(1.0, np.abs(ev).max()):
                raise ValueError("Q must be positive semidefinite")
        if self.Ru is not None and np.linalg.eigvalsh(self.Ru)[0] <= 0:
            raise ValueError("Ru must be positive definite")

    def weights(self, d, m):
        """Return ``(Q, Ru)`` as full matrices for a system of size ``(d, m)``."""
        Q = np.zeros((d, d)) if self.Q is None else self.Q
        Ru = np.eye(m) if self.Ru is None else self.Ru
        if Q.shape != (d, d) or Ru.shape != (m, m):
            raise DimensionError(f"cost weights do not match system size d={d}, m={m}")
        return Q, Ru


def running_cost(spec, Q, Ru, gamma, u):
    """Pointwise running cost for rows of states ``gamma`` and controls ``u``."""
    gamma = np.atleast_2d(gamma)
    u = np.atleast_2d(u)
    val = np.einsum("ki,ij,kj->k", u, Ru, u)
    if spec.kind == LQ:
        val = val + np.einsum("ki,ij,kj->k", gamma, Q, gamma)
    return val


def q_structure_residual(spec, es):
    """Relative size of ``Q P_perp - Q``; zero when the state weight ignores E."""
    if spec.Q is None:
        return 0.0
    scale = max(np.abs(spec.Q).max(), 1e-300)
    return float(np.abs(spec.Q @ es.P_perp - spec.Q).max() / scale)


@dataclass(frozen=True, eq=False)
class CostModel:
    """A transport cost c(x, y) for a given system and running cost.

    Build with :func:`cost_model`.
    """

    system: LTISystem
    spec: RunningCostSpec
    gram: Optional[Gramian] = None
    quad_nodes: int = 64
    steer_cond_max: float = 1e12

    @property
    def kind(self):
        return self.spec.kind

    @cached_property
    def weights(self):
        return self.spec.weights(self.system.d, self.system.m)

    @cached_property
    def hamiltonian(self):
        A, B = self.system.A, self.system.B
        Q, Ru = self.weights
        return np.block([[A, -B @ np.linalg.solve(Ru, B.T)], [-Q, -A.T]])

    @cached_property
    def hamiltonian_blocks(self):
        """``(Phi11, Phi12, Phi21, Phi22)`` of ``e^H`` on the unit horizon."""
        d = self.system.d
        Phi = expm(self.hamiltonian)
        return Phi[:d, :d], Phi[:d, d:], Phi[d:, :d], Phi[d:, d:]

    @cached_property
    def steer_condition(self):
        return float(np.linalg.cond(self.hamiltonian_blocks[1]))

    @cached_property
    def _flow_nodes(self):
        # state/costate propagators e^{H s} at the quadrature nodes
        s, w = gauss_legendre(self.quad_nodes, 0.0, 1.0)
        return s, w, expm(self.hamiltonian[None] * s[:, None, None])

    def costate0(self, x, y):
        """Initial costate steering x to y; rows of x, y give rows of the result."""
        if self.steer_condition > self.steer_cond_max:
            raise SteeringFailureError(
                f"conjugate-time/steering failure: cond(Phi12) = {self.steer_condition:.3e}"
            )
        P11, P12, _, _ = self.hamiltonian_blocks
        rhs = np.atleast_2d(y) - np.atleast_2d(x) @ P11.T
        return np.linalg.solve(P12, rhs.T).T

    def cost(self, x, y):
        """c(x, y); rows of ``x`` and ``y`` are evaluated pairwise."""
        if self.kind == MIN_ENERGY:
            return min_energy_cost(self, x, y)
        return lq_cost(self, x, y)


def cost_model(system, spec=None, quad_nodes=64, gramian_rtol=1e-10):
    """Assemble a :class:`CostModel`; computes the Gramian for min-energy costs."""
    spec = spec or RunningCostSpec()
    spec.weights(system.d, system.m)
    gram = gramian(system, nodes=quad_nodes, rtol=gramian_rtol) if spec.kind == MIN_ENERGY else None
    return CostModel(system=system, spec=spec, gram=gram, quad_nodes=quad_nodes)


def _pairs(cm, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    scalar = x.ndim == 1 and y.ndim == 1
    x2, y2 = np.atleast_2d(x), np.atleast_2d(y)
    d = cm.system.d
    if x2.shape[-1] != d or y2.shape[-1] != d:
        raise DimensionError(f"endpoints must have length {d}")
    x2, y2 = np.broadcast_arrays(x2, y2)
    return x2, y2, scalar


def min_energy_cost(cm, x, y):
    """Minimum control energy to steer x to y in unit time."""
    if cm.kind != MIN_ENERGY:
        raise ValueError("min_energy_cost requires a min_energy cost model")
    x2, y2, scalar = _pairs(cm, x, y)
    r = y2 - x2 @ cm.system.expA.T
    val = np.einsum("ki,ij,kj->k", r, cm.gram.W_inv, r)
    val = np.maximum(val, 0.0)
    return float(val[0]) if scalar else val


def lq_cost(cm, x, y):
    """LQ transport cost by quadrature along the Hamiltonian flow.

    The costate ``p`` satisfies ``u = -Ru^{-1} B^T p``; with ``p0`` fixed by the
    endpoint condition, ``[x(s); p(s)] = e^{H s} [x; p0]`` is sampled at the
    Gauss-Legendre nodes and the running cost integrated.
    """
    x2, y2, scalar = _pairs(cm, x, y)
    d = cm.system.d
    Q, Ru = cm.weights
    p0 = cm.costate0(x2, y2)
    s, w, E = cm._flow_nodes
    z0 = np.concatenate([x2, p0], axis=1)
    Z = np.einsum("kij,nj->nki", E, z0)
    gam, cost_p = Z[..., :d], Z[..., d:]
    u = -cost_p @ np.linalg.solve(Ru, cm.system.B.T).T
    L = np.einsum("nki,ij,nkj->nk", u, Ru, u)
    L = L + np.einsum("nki,ij,nkj->nk", gam, Q, gam)
    val = L @ w
    return float(val[0]) if scalar else val


@dataclass(frozen=True, eq=False)
class ReducedCost:
    """Quadratic cost ``h(w) = w^T M w`` on reduced equilibrium coordinates."""

    M: np.ndarray
    provenance: str = "gramian-restriction"

    def __post_init__(self):
        M = _sym(np.atleast_2d(np.asarray(self.M, dtype=float)))
        M.setflags(write=False)
        object.__setattr__(self, "M", M)

    @property
    def p(self):
        return self.M.shape[0]

    def h(self, w):
        w = np.asarray(w, dtype=float)
        return np.einsum("...i,ij,...j->...", w, self.M, w)

    def __call__(self, wx, wy):
        return self.h(np.asarray(wx, dtype=float) - np.asarray(wy, dtype=float))

    def scaled(self, alpha):
        return ReducedCost(alpha * self.M, self.provenance)

    def cost_matrix(self, X, Y):
        """Pairwise costs ``C[i, j] = h(X[i] - Y[j])``.

        Computed coordinate-by-coordinate after a Cholesky change of variables
        so that coincident points give exactly zero.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if X.shape[1] != self.p or Y.shape[1] != self.p:
            raise DimensionError(f"points must have {self.p} reduced coordinates")
        L = np.linalg.cholesky(self.M)
        ZX, ZY = X @ L, Y @ L
        C = np.zeros((X.shape[0], Y.shape[0]))
        for k in range(self.p):
            diff = ZX[:, k][:, None] - ZY[:, k][None, :]
            C += diff * diff
        return C


def _random_equilibrium_pairs(es, n, rng):
    wx = rng.standard_normal((n, es.p))
    wy = rng.standard_normal((n, es.p))
    return wx, wy


def reduced_quadratic(cm, es, n_check=32, seed=0, rtol=1e-8):
    """Quadratic form of the cost on E in reduced coordinates.

    Min-energy costs restrict ``W^{-1}`` to E; LQ costs are polarized from
    ``c(embed(w), 0)``. Either way the identity ``h(reduce(x) - reduce(y)) =
    c(x, y)`` is checked on random equilibrium pairs.

    Raises
    ------
    NotEndpointQuadraticError
        If the identity check fails (e.g. the state weight acts on E).
    NotStrictlyConvexError
        If the extracted form is not positive definite.
    """
    p = es.p
    if cm.kind == MIN_ENERGY:
        M = es.basis.T @ cm.gram.W_inv @ es.basis
        prov = "gramian-restriction"
    else:
        I = np.eye(p)
        diag = cm.cost(embed(es, I), np.zeros((p, cm.system.d)))
        M = np.diag(diag)
        for i in range(p):
            for j in range(i + 1, p):
                hij = cm.cost(embed(es, I[i] + I[j]), np.zeros(cm.system.d))
                M[i, j] = M[j, i] = 0.5 * (hij - diag[i] - diag[j])
        prov = "polarization"
    rc = ReducedCost(M, prov)

    rng = np.random.default_rng(seed)
    wx, wy = _random_equilibrium_pairs(es, n_check, rng)
    direct = cm.cost(embed(es, wx), embed(es, wy))
    reduced = rc(wx, wy)
    err = np.abs(direct - reduced) / np.maximum(np.abs(direct), 1e-300)
    if err.max() > rtol:
        raise NotEndpointQuadraticError(
            f"reduced cost does not reproduce c on E (max relative error {err.max():.3e}); "
            "the cost is not a function of x - y"
        )
    lam = convexity_certificate(rc)
    if not lam > 0:
        raise NotStrictlyConvexError(f"reduced cost not strictly convex: min eigenvalue {lam:.3e}")
    return rc


@dataclass(frozen=True, eq=False)
class QuadraticCostForm:
    """``c(x, y) = wx^T Dm wx - wx^T Em wy + wy^T Fm wy`` in reduced coordinates."""

    Dm: np.ndarray
    Em: np.ndarray
    Fm: np.ndarray

    def __call__(self, wx, wy):
        wx = np.asarray(wx, dtype=float)
        wy = np.asarray(wy, dtype=float)
        return (
            np.einsum("...i,ij,...j->...", wx, self.Dm, wx)
            - np.einsum("...i,ij,...j->...", wx, self.Em, wy)
            + np.einsum("...i,ij,...j->...", wy, self.Fm, wy)
        )


def quadratic_form_extract(cm, es, n_check=100, seed=0, rtol=1e-6):
    """Polarize the cost on E into its (Dm, Em, Fm) endpoint quadratic form."""
    p, d = es.p, cm.system.d
    I = np.eye(p)
    Z = np.zeros((p, d))
    basis_pts = embed(es, I)
    dx = cm.cost(basis_pts, Z)
    fy = cm.cost(Z, basis_pts)
    Dm, Fm = np.diag(dx), np.diag(fy)
    for i in range(p):
        for j in range(i + 1, p):
            v = embed(es, I[i] + I[j])
            Dm[i, j] = Dm[j, i] = 0.5 * (cm.cost(v, np.zeros(d)) - dx[i] - dx[j])
            Fm[i, j] = Fm[j, i] = 0.5 * (cm.cost(np.zeros(d), v) - fy[i] - fy[j])
    Em = np.empty((p, p))
    for i in range(p):
        cij = cm.cost(np.repeat(basis_pts[i][None], p, axis=0), basis_pts)
        Em[i] = dx[i] + fy - cij
    form = QuadraticCostForm(Dm, Em, Fm)

    rng = np.random.default_rng(seed)
    wx, wy = _random_equilibrium_pairs(es, n_check, rng)
    direct = cm.cost(embed(es, wx), embed(es, wy))
    err = np.abs(form(wx, wy) - direct) / np.maximum(np.abs(direct), 1e-12)
    if err.max() > rtol:
        raise NotEndpointQuadraticError(
            f"cost not endpoint-quadratic: reconstruction error {err.max():.3e}"
        )
    for name, mat in (("Dm", Dm), ("Fm", Fm)):
        if np.linalg.eigvalsh(mat)[0] <= 1e-8:
            raise NotStrictlyConvexError(f"{name} is not positive definite")
    return form


def translation_invariance_probe(cm, es, n_samples=64, seed=0, shifts=True):
    """Max of |c(x+z, y+z) - c(x, y)| / (1 + |c(x, y)|) over random x, y, z on E.

    With ``shifts=False`` the shift z is zero (a sanity baseline).
    """
    rng = np.random.default_rng(seed)
    wx, wy = _random_equilibrium_pairs(es, n_samples, rng)
    wz = rng.standard_normal((n_samples, es.p)) if shifts else np.zeros((n_samples, es.p))
    x, y, z = embed(es, wx), embed(es, wy), embed(es, wz)
    base = cm.cost(x, y)
    moved = cm.cost(x + z, y + z)
    return float(np.max(np.abs(moved - base) / (1.0 + np.abs(base))))


def convexity_certificate(rc):
    """Smallest eigenvalue of the reduced form; positive certifies strict convexity."""
    return float(np.linalg.eigvalsh(rc.M)[0])
