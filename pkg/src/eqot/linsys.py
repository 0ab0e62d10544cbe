"""Dense linear-system computations for LTI systems on the unit horizon.

Everything here works with small dense matrices (d up to a few hundred):
matrix exponentials, Gauss-Legendre quadrature on [a, b], the
controllability Gramian and the equilibrium subspace ker(A) together with
its projectors and the reduce/embed coordinate maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .errors import (
    DimensionError,
    OffEquilibriumError,
    TrivialEquilibriumError,
    UncontrollableSystemError,
)

# Pade(13) coefficients and the 1-norm threshold below which no scaling is needed
# (Higham, "The scaling and squaring method for the matrix exponential revisited").
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def _as_matrix(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DimensionError(f"{name} has non-finite entries")
    return M


def expm(M):
    """Matrix exponential by Pade(13) scaling and squaring.

    Accepts a single ``(d, d)`` matrix or a stack ``(..., d, d)``; stacks are
    exponentiated independently in one vectorized pass.
    """
    M = _as_matrix(M)
    single = M.ndim == 2
    X = M.reshape((-1,) + M.shape[-2:])
    d = X.shape[-1]

    norms = np.abs(X).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norms > _THETA13, np.ceil(np.log2(norms / _THETA13)), 0.0)
    s = s.astype(int)
    X = X / (2.0 ** s)[:, None, None]

    b = _PADE13
    ident = np.broadcast_to(np.eye(d), X.shape)
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    U = X @ (
        X6 @ (b[13] * X6 + b[11] * X4 + b[9] * X2)
        + b[7] * X6
        + b[5] * X4
        + b[3] * X2
        + b[1] * ident
    )
    V = X6 @ (b[12] * X6 + b[10] * X4 + b[8] * X2) + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * ident
    R = np.linalg.solve(V - U, V + U)
    R[norms == 0] = np.eye(d)  # the solve leaves 1 - eps on the diagonal

    for k in range(int(s.max(initial=0))):
        sq = k < s
        R[sq] = R[sq] @ R[sq]

    return R[0] if single else R.reshape(M.shape)


@lru_cache(maxsize=None)
def _leggauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(n=64, a=0.0, b=1.0, panels=1):
    """Composite Gauss-Legendre nodes and weights on ``[a, b]``.

    Returns ``(nodes, weights)`` with ``panels * n`` entries each.
    """
    x, w = _leggauss(n)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


@dataclass(frozen=True, eq=False)
class LTISystem:
    """Linear time-invariant system ``dx/dt = A x + B u``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A").copy()
        B = np.asarray(self.B, dtype=float).copy()
        if A.ndim != 2:
            raise DimensionError("A must be a 2-D matrix")
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if B.ndim != 2 or B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise DimensionError(f"B must be {A.shape[0]}x m with m >= 1, got {B.shape}")
        if not np.all(np.isfinite(B)):
            raise DimensionError("B has non-finite entries")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @cached_property
    def expA(self):
        return expm(self.A)


@dataclass(frozen=True, eq=False)
class Gramian:
    W: np.ndarray
    W_inv: np.ndarray
    min_eigenvalue: float
    max_eigenvalue: float
    horizon: float = field(default=1.0)


def _gramian_integrand(sys, taus):
    E = expm(sys.A[None, :, :] * (1.0 - taus)[:, None, None])
    EB = E @ sys.B
    return EB @ np.swapaxes(EB, -1, -2)


def gramian_matrix(sys, nodes=64, panels=1):
    """W = int_0^1 e^{A(1-s)} B B^T e^{A^T(1-s)} ds by Gauss-Legendre quadrature."""
    taus, weights = gauss_legendre(nodes, 0.0, 1.0, panels)
    W = np.einsum("k,kij->ij", weights, _gramian_integrand(sys, taus))
    return 0.5 * (W + W.T)


def gramian_vanloan(sys):
    """Gramian from one block exponential (Van Loan's construction).

    Independent of the quadrature route; used to cross-check it.
    """
    d = sys.d
    blk = np.zeros((2 * d, 2 * d))
    blk[:d, :d] = -sys.A
    blk[:d, d:] = sys.B @ sys.B.T
    blk[d:, d:] = sys.A.T
    F = expm(blk)
    W = F[d:, d:].T @ F[:d, d:]
    return 0.5 * (W + W.T)


def gramian(sys, nodes=64, panels=1, rtol=1e-10):
    """Unit-horizon controllability Gramian with a certified inverse.

    Raises
    ------
    UncontrollableSystemError
        If the smallest eigenvalue of W is below ``rtol`` times the largest.
    """
    W = gramian_matrix(sys, nodes, panels)
    eig = np.linalg.eigvalsh(W)
    lo, hi = float(eig[0]), float(eig[-1])
    if hi <= 0.0 or lo <= rtol * hi:
        raise UncontrollableSystemError(
            f"uncontrollable system: Gramian min eigenvalue {lo:.3e} (max {hi:.3e})",
            min_eigenvalue=lo,
        )
    W_inv = np.linalg.inv(W)
    W_inv = 0.5 * (W_inv + W_inv.T)
    resid = np.abs(W @ W_inv - np.eye(sys.d)).max()
    if resid > 1e-8:
        raise UncontrollableSystemError(
            f"uncontrollable system: Gramian inverse residual {resid:.3e}", min_eigenvalue=lo
        )
    W.setflags(write=False)
    W_inv.setflags(write=False)
    return Gramian(W=W, W_inv=W_inv, min_eigenvalue=lo, max_eigenvalue=hi)


@dataclass(frozen=True, eq=False)
class EquilibriumSpace:
    """Orthonormal basis of ker(A) and the associated coordinate maps.

    ``reduce_map`` is ``basis.T`` and ``embed_map`` is ``basis``, so reduced
    coordinates are orthonormal coordinates on E.
    """

    basis: np.ndarray
    P_E: np.ndarray
    P_perp: np.ndarray
    tol: float = 1e-8

    @property
    def p(self):
        return self.basis.shape[1]

    @property
    def d(self):
        return self.basis.shape[0]

    @property
    def reduce_map(self):
        return self.basis.T

    @property
    def embed_map(self):
        return self.basis


def _canonical_basis(P, p):
    # Orthonormalize projector columns in index order; depends only on the subspace,
    # unlike SVD kernel vectors when zero singular values repeat.
    d = P.shape[0]
    chosen = []
    Q = np.zeros((d, 0))
    for j in range(d):
        r = P[:, j] - Q @ (Q.T @ P[:, j])
        if np.linalg.norm(r) > 1e-3:
            chosen.append(j)
            Q, _ = np.linalg.qr(P[:, chosen])
        if len(chosen) == p:
            break
    if len(chosen) < p:
        Q, _ = np.linalg.qr(P)
        Q = Q[:, :p]
    else:
        # second pass for orthogonality at machine precision
        Q, _ = np.linalg.qr(Q)
    for k in range(p):
        col = Q[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            Q[:, k] = -col
    return Q


def equilibrium_space(sys, tol=1e-9, membership_tol=1e-8):
    """Kernel of A via singular-value thresholding at ``tol * sigma_max``.

    Raises
    ------
    TrivialEquilibriumError
        If A has no numerically-zero singular values.
    """
    A = sys.A if isinstance(sys, LTISystem) else _as_matrix(sys, "A")
    _, sv, Vt = np.linalg.svd(A)
    smax = sv[0] if sv.size else 0.0
    null = sv <= tol * smax if smax > 0 else np.ones_like(sv, dtype=bool)
    p = int(null.sum())
    if p == 0:
        raise TrivialEquilibriumError("trivial equilibrium set: A is nonsingular")
    K = Vt[null].T
    P = K @ K.T
    P = 0.5 * (P + P.T)
    basis = _canonical_basis(P, p)
    P_E = basis @ basis.T
    P_perp = np.eye(A.shape[0]) - P_E
    for arr in (basis, P_E, P_perp):
        arr.setflags(write=False)
    return EquilibriumSpace(basis=basis, P_E=P_E, P_perp=P_perp, tol=membership_tol)


def project(es, v, which="E"):
    """Project ``v`` (or rows of a stack) onto E or its orthogonal complement."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != es.d:
        raise DimensionError(f"expected vectors of length {es.d}, got {v.shape}")
    if which == "E":
        return v @ es.P_E.T
    if which == "perp":
        return v @ es.P_perp.T
    raise ValueError(f"which must be 'E' or 'perp', got {which!r}")


def reduce(es, x):
    """Reduced coordinates of a point on E; accepts a single vector or rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != es.d:
        raise DimensionError(f"expected vectors of length {es.d}, got {x.shape}")
    off = np.linalg.norm(np.atleast_2d(project(es, x, "perp")), axis=-1)
    scale = np.linalg.norm(np.atleast_2d(x), axis=-1)
    bad = off > es.tol * np.maximum(scale, 1e-300)
    bad &= off > 1e-300
    if np.any(bad):
        worst = float(off.max())
        raise OffEquilibriumError(f"off-equilibrium input: |P_perp x| = {worst:.3e}", residual=worst)
    return x @ es.basis


def embed(es, w):
    """Embed reduced coordinates into state space; accepts a vector or rows."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != es.p:
        raise DimensionError(f"expected reduced vectors of length {es.p}, got {w.shape}")
    return w @ es.basis.T
