"""Optimal steering between equilibria and displacement interpolation.

Single-pair trajectories are represented by :class:`SteeringSolution`, whose
``control`` and ``state`` attributes are vectorized samplers ``t -> rows``.
States are obtained from controls by Gauss-Legendre quadrature of the
variation-of-constants integral, never by ODE stepping.

For whole point clouds, trajectories are linear in the endpoints,
``x(t) = Sx(t) x + Sy(t) y``, and :func:`transfer_matrices` computes these
d x d matrices once per time so particles can be pushed in bulk.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .costs import LQ, MIN_ENERGY, running_cost
from .errors import OffEquilibriumError, SteeringFailureError
from .linsys import expm, gauss_legendre
from .measures import DiscreteMeasure, rasterize

DEFAULT_TIMES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
# quadrature noise in reduced interpolation profiles is rounded away at this many decimals
PROFILE_DECIMALS = 13


def worker_count(requested=None):
    """Worker threads to use; ``EQOT_THREADS`` caps the count."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("EQOT_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, int(n))


@dataclass(eq=False)
class SteeringSolution:
    x: np.ndarray
    y: np.ndarray
    control: Callable
    state: Callable
    cost: float = float("nan")


def _times(t):
    t = np.asarray(t, dtype=float)
    return np.atleast_1d(t), t.ndim == 0


def state_trajectory(sys, x, control, nodes=64):
    """State sampler for ``dx/dt = A x + B u`` started at ``x``.

    ``gamma(t) = e^{At} x + int_0^t e^{A(t-s)} B u(s) ds`` with an ``nodes``-point
    Gauss-Legendre rule on ``[0, t]`` for each requested time.
    """
    x = np.asarray(x, dtype=float)
    xi, wi = gauss_legendre(nodes, -1.0, 1.0)

    def state(t):
        ts, scalar = _times(t)
        half = 0.5 * ts
        taus = half[:, None] * (1.0 + xi[None, :])  # (K, N)
        lags = ts[:, None] - taus
        E = expm(sys.A[None, None] * lags[..., None, None])  # (K, N, d, d)
        U = np.asarray(control(taus.ravel()), dtype=float).reshape(taus.shape + (sys.m,))
        integrand = np.einsum("knij,jm,knm->kni", E, sys.B, U)
        integral = np.einsum("kni,n->ki", integrand, wi) * half[:, None]
        free = np.einsum("kij,j->ki", expm(sys.A[None] * ts[:, None, None]), x)
        out = free + integral
        return out[0] if scalar else out

    return state


def trajectory_cost(sol, spec, sys, nodes=64):
    """Quadrature of the running cost along a steering solution."""
    s, w = gauss_legendre(nodes, 0.0, 1.0)
    Q, Ru = spec.weights(sys.d, sys.m)
    u = np.asarray(sol.control(s))
    gam = np.asarray(sol.state(s)) if spec.kind == LQ else np.zeros((s.size, sys.d))
    return float(running_cost(spec, Q, Ru, gam, u) @ w)


def _check_endpoints(sol, label):
    end = sol.state(1.0)
    scale = 1.0 + np.linalg.norm(sol.x) + np.linalg.norm(sol.y)
    err = np.linalg.norm(end - sol.y)
    if err > 1e-8 * scale:
        raise SteeringFailureError(f"{label}: terminal state misses target by {err:.3e}")


def steering_control(cm, x, y, verify=True):
    """Minimum-energy control steering ``x`` to ``y`` in unit time.

    ``u(t) = B^T e^{A^T (1-t)} W^{-1} (y - e^A x)``; the terminal condition is
    checked against the integrated state when ``verify`` is set.
    """
    if cm.kind != MIN_ENERGY:
        raise ValueError("steering_control needs a min_energy cost model")
    sys = cm.system
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lam = cm.gram.W_inv @ (y - sys.expA @ x)

    def control(t):
        ts, scalar = _times(t)
        E = expm(sys.A.T[None] * (1.0 - ts)[:, None, None])
        u = np.einsum("ji,kjl,l->ki", sys.B, E, lam)
        return u[0] if scalar else u

    sol = SteeringSolution(x, y, control, state_trajectory(sys, x, control, cm.quad_nodes))
    if verify:
        _check_endpoints(sol, "min-energy steering")
    sol.cost = trajectory_cost(sol, cm.spec, sys, cm.quad_nodes)
    return sol


def lq_steering(cm, x, y, verify=True):
    """Optimal LQ trajectory from the Hamiltonian state/costate flow."""
    if cm.kind != LQ:
        raise ValueError("lq_steering needs an lq cost model")
    sys = cm.system
    d = sys.d
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z0 = np.concatenate([x, cm.costate0(x, y)[0]])
    _, Ru = cm.weights
    gain = np.linalg.solve(Ru, sys.B.T)

    def flow(t):
        ts, scalar = _times(t)
        Z = np.einsum("kij,j->ki", expm(cm.hamiltonian[None] * ts[:, None, None]), z0)
        return Z, scalar

    def state(t):
        Z, scalar = flow(t)
        return Z[0, :d] if scalar else Z[:, :d]

    def control(t):
        Z, scalar = flow(t)
        u = -Z[:, d:] @ gain.T
        return u[0] if scalar else u

    sol = SteeringSolution(x, y, control, state)
    if verify:
        _check_endpoints(sol, "LQ steering")
    sol.cost = trajectory_cost(sol, cm.spec, sys, cm.quad_nodes)
    return sol


def steer(cm, x, y):
    """Optimal trajectory for whichever running cost ``cm`` carries."""
    return steering_control(cm, x, y) if cm.kind == MIN_ENERGY else lq_steering(cm, x, y)


def reverse_trajectory(sol, es, cm=None):
    """Reversed trajectory ``-gamma(t) + x + y`` driven by ``-u``.

    Valid when both endpoints lie on E; the result starts at ``y`` and ends at
    ``x``. Its cost is recomputed when a cost model is given.
    """
    for name, pt in (("x", sol.x), ("y", sol.y)):
        off = np.linalg.norm(es.P_perp @ pt)
        if off > es.tol * max(np.linalg.norm(pt), 1.0):
            raise OffEquilibriumError(f"reverse_trajectory: endpoint {name} is off E by {off:.3e}", off)
    x, y = sol.x, sol.y
    shift = x + y

    def control(t):
        return -np.asarray(sol.control(t))

    def state(t):
        return shift - np.asarray(sol.state(t))

    rev = SteeringSolution(y.copy(), x.copy(), control, state, cost=sol.cost)
    if cm is not None:
        rev.cost = trajectory_cost(rev, cm.spec, cm.system, cm.quad_nodes)
    return rev


def ode_residual(sys, sol, times=None, nodes=64):
    """Max deviation of ``sol.state`` from re-integrating ``sol.control`` from ``sol.x``.

    Relative to ``1 + |x| + |y|``; this is the integral form of the ODE residual.
    """
    if times is None:
        times = np.linspace(0.0, 1.0, 21)
    ref = state_trajectory(sys, sol.x, sol.control, nodes)(times)
    got = np.asarray(sol.state(times))
    scale = 1.0 + np.linalg.norm(sol.x) + np.linalg.norm(sol.y)
    return float(np.abs(got - ref).max() / scale)


def transfer_matrices(cm, times):
    """Endpoint-to-trajectory maps at each time.

    Returns ``(Sx, Sy, Ux, Uy)`` with shapes ``(K, d, d)`` and ``(K, m, d)``
    such that ``x(t) = Sx x0 + Sy x1`` and ``u(t) = Ux x0 + Uy x1``.
    """
    sys = cm.system
    d = sys.d
    ts, _ = _times(times)
    if cm.kind == MIN_ENERGY:
        W_inv, eA = cm.gram.W_inv, sys.expA
        xi, wi = gauss_legendre(cm.quad_nodes, -1.0, 1.0)
        half = 0.5 * ts
        taus = half[:, None] * (1.0 + xi[None, :])
        E_lag = expm(sys.A[None, None] * (ts[:, None] - taus)[..., None, None])
        E_rem = expm(sys.A[None, None] * (1.0 - taus)[..., None, None])
        BBt = sys.B @ sys.B.T
        # G(t) = int_0^t e^{A(t-s)} B B^T e^{A^T(1-s)} ds
        G = np.einsum("knij,jl,knml,n->kim", E_lag, BBt, E_rem, wi) * half[:, None, None]
        Sy = G @ W_inv
        Sx = expm(sys.A[None] * ts[:, None, None]) - Sy @ eA
        Uy = np.einsum("ji,kjl,lm->kim", sys.B, expm(sys.A.T[None] * (1.0 - ts)[:, None, None]), W_inv)
        Ux = -Uy @ eA
        return Sx, Sy, Ux, Uy
    P11, P12, _, _ = cm.hamiltonian_blocks
    if cm.steer_condition > cm.steer_cond_max:
        raise SteeringFailureError(f"conjugate-time/steering failure: cond(Phi12) = {cm.steer_condition:.3e}")
    P12_inv = np.linalg.inv(P12)
    E = expm(cm.hamiltonian[None] * ts[:, None, None])
    E11, E12, E21, E22 = E[:, :d, :d], E[:, :d, d:], E[:, d:, :d], E[:, d:, d:]
    Sy = E12 @ P12_inv
    Sx = E11 - Sy @ P11
    Py = E22 @ P12_inv
    Px = E21 - Py @ P11
    _, Ru = cm.weights
    gain = -np.linalg.solve(Ru, sys.B.T)
    return Sx, Sy, gain @ Px, gain @ Py


def reduced_profiles(cm, es, times):
    """Reduced position maps ``(Kx, Ky)``, each ``(K, p, p)``, for rest-to-rest motion on E."""
    Sx, Sy, _, _ = transfer_matrices(cm, times)
    V = es.basis
    Kx = np.round(V.T @ Sx @ V, PROFILE_DECIMALS) + 0.0
    Ky = np.round(V.T @ Sy @ V, PROFILE_DECIMALS) + 0.0
    return Kx, Ky


def particle_positions(cm, es, Wx, Wy, times):
    """Reduced positions of particles moving from ``Wx`` to ``Wy``; shape ``(K, n, p)``."""
    Kx, Ky = reduced_profiles(cm, es, times)
    Wx = np.atleast_2d(Wx)
    Wy = np.atleast_2d(Wy)
    return np.einsum("np,kqp->knq", Wx, Kx) + np.einsum("np,kqp->knq", Wy, Ky)


def particle_speeds(cm, es, Wx, Wy, times):
    """Speed of each particle's reduced position at each time; shape ``(K, n)``."""
    sys = cm.system
    Sx, Sy, Ux, Uy = transfer_matrices(cm, times)
    Vx = sys.A[None] @ Sx + sys.B[None] @ Ux
    Vy = sys.A[None] @ Sy + sys.B[None] @ Uy
    V = es.basis
    X = np.atleast_2d(Wx) @ V.T
    Y = np.atleast_2d(Wy) @ V.T
    vel = np.einsum("nd,kqd->knq", X, V.T[None] @ Vx) + np.einsum("nd,kqd->knq", Y, V.T[None] @ Vy)
    return np.linalg.norm(vel, axis=-1)


def time_label(t):
    """``T<num>-<den>`` label for a frame time (1/5 -> ``T1-5``)."""
    fr = Fraction(float(t)).limit_denominator(1000)
    return f"T{fr.numerator}" if fr.denominator == 1 else f"T{fr.numerator}-{fr.denominator}"


@dataclass(eq=False)
class FrameSet:
    times: list
    frames: list
    positions: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def write(self, outdir, label, write_positions=False, start_index=0):
        """Write one PGM per time; returns index entries for ``frames.json``."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, (t, fr) in enumerate(zip(self.times, self.frames)):
            name = f"frame_{k + start_index}_{time_label(t)}_{label}.pgm"
            fr.to_pgm(outdir / name)
            entry = {
                "index": k + start_index,
                "t": float(t),
                "label": label,
                "file": name,
                "mass": fr.mass,
                "clipped_mass": fr.clipped_mass,
            }
            if write_positions and self.positions:
                pname = name[:-4] + "_positions.csv"
                np.savetxt(outdir / pname, self.positions[k], delimiter=",", fmt="%.17g")
                entry["positions"] = pname
            entries.append(entry)
        return entries


def displacement_interpolate(
    cm,
    es,
    src,
    dst,
    weights,
    times=DEFAULT_TIMES,
    resolution=256,
    bandwidth=0.0,
    domain=None,
    workers=None,
):
    """Frames of the measure carried along optimal trajectories.

    ``src[i]`` moves to ``dst[i]`` (reduced coordinates) carrying
    ``weights[i]``; at each time the particle cloud is rasterized.
    """
    src = np.atleast_2d(np.asarray(src, dtype=float))
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    weights = np.asarray(weights, dtype=float)
    times = [float(t) for t in times]
    pos = particle_positions(cm, es, src, dst, times)
    if domain is None:
        allpts = np.concatenate([src, dst])
        domain = np.stack([allpts.min(0), allpts.max(0)], axis=1)

    def render(k):
        return rasterize(DiscreteMeasure(pos[k], weights), resolution, bandwidth, domain)

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        frames = list(pool.map(render, range(len(times))))
    meta = {"resolution": list(np.broadcast_to(resolution, (es.p,)).tolist()), "bandwidth": bandwidth, "n": int(src.shape[0])}
    return FrameSet(times=times, frames=frames, positions=list(pos), meta=meta)
