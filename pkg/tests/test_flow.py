import numpy as np
import pytest

from eqot.costs import LQ, RunningCostSpec, cost_model
from eqot.errors import OffEquilibriumError
from eqot.flow import (
    DEFAULT_TIMES,
    displacement_interpolate,
    lq_steering,
    ode_residual,
    particle_positions,
    particle_speeds,
    reduced_profiles,
    reverse_trajectory,
    steer,
    steering_control,
    time_label,
    trajectory_cost,
    transfer_matrices,
    worker_count,
)
from eqot.linsys import LTISystem, embed, equilibrium_space, gauss_legendre
from eqot.measures import read_pgm
from oracles import DI4_A, DI4_B, DI_A, DI_B, smoothstep


@pytest.fixture(scope="module")
def di4():
    sys = LTISystem(DI4_A, DI4_B)
    return sys, cost_model(sys), equilibrium_space(sys)


def test_steering_hits_target_with_matching_cost(di4):
    sys, cm, _ = di4
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=4), rng.normal(size=4)
    sol = steering_control(cm, x, y)
    np.testing.assert_allclose(sol.state(1.0), y, atol=1e-10)
    np.testing.assert_allclose(sol.state(0.0), x, atol=1e-14)
    assert sol.cost == pytest.approx(cm.cost(x, y), rel=1e-10)
    assert ode_residual(sys, sol) < 1e-12


def test_steering_is_optimal_against_perturbations():
    sys = LTISystem(DI_A, DI_B)
    cm = cost_model(sys)
    x, y = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    sol = steering_control(cm, x, y)
    s, w = gauss_legendre(64, 0.0, 1.0)
    u = sol.control(s)[:, 0]
    # admissible perturbations keep both endpoints: int_0^1 e^{A(1-t)} B v(t) dt = 0,
    # which for the double integrator means int v = int t v = 0
    for k in (2, 3, 5):
        v = np.polynomial.legendre.Legendre.basis(k, domain=[0, 1])(s)
        assert abs(w @ v) < 1e-12 and abs(w @ (s * v)) < 1e-12
        for eps in (1e-2, -1e-2, 0.3):
            assert w @ (u + eps * v) ** 2 > sol.cost


def test_control_closed_form_double_integrator():
    cm = cost_model(LTISystem(DI_A, DI_B))
    sol = steering_control(cm, np.zeros(2), np.array([2.0, 0.0]))
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(sol.control(t)[:, 0], 2.0 * (6 - 12 * t), atol=1e-12)


def test_reversal(di4):
    sys, cm, es = di4
    rng = np.random.default_rng(1)
    x, y = embed(es, rng.normal(size=2)), embed(es, rng.normal(size=2))
    sol = steering_control(cm, x, y)
    rev = reverse_trajectory(sol, es, cm)
    np.testing.assert_allclose(rev.state(0.0), y, atol=1e-12)
    np.testing.assert_allclose(rev.state(1.0), x, atol=1e-10)
    assert ode_residual(sys, rev) < 1e-12
    assert rev.cost == pytest.approx(sol.cost, rel=1e-10)
    with pytest.raises(OffEquilibriumError):
        reverse_trajectory(steering_control(cm, np.ones(4), y), es)


def test_lq_steering_matches_lq_cost(di4):
    sys, _, es = di4
    cm = cost_model(sys, RunningCostSpec(LQ, Q=np.diag([0.0, 1.0, 0.0, 2.0])))
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=4), rng.normal(size=4)
    sol = lq_steering(cm, x, y)
    np.testing.assert_allclose(sol.state(1.0), y, atol=1e-10)
    assert sol.cost == pytest.approx(cm.cost(x, y), rel=1e-9)
    assert ode_residual(sys, sol) < 1e-10
    assert steer(cm, x, y).cost == pytest.approx(sol.cost)
    with pytest.raises(ValueError):
        steering_control(cm, x, y)


def test_trajectory_cost_of_reversed_lq_path(di4):
    sys, _, es = di4
    cm = cost_model(sys, RunningCostSpec(LQ, Q=np.diag([0.0, 1.0, 0.0, 0.0])))
    x, y = embed(es, np.array([0.0, 1.0])), embed(es, np.array([2.0, -1.0]))
    sol = lq_steering(cm, x, y)
    rev = reverse_trajectory(sol, es, cm)
    assert rev.cost == pytest.approx(trajectory_cost(rev, cm.spec, sys), rel=1e-12)
    assert rev.cost == pytest.approx(cm.cost(y, x), rel=1e-8)


def test_transfer_matrices_reproduce_trajectories(di4):
    sys, cm, _ = di4
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=4), rng.normal(size=4)
    t = np.array([0.0, 0.3, 0.5, 1.0])
    Sx, Sy, Ux, Uy = transfer_matrices(cm, t)
    sol = steering_control(cm, x, y)
    np.testing.assert_allclose(Sx @ x + Sy @ y, sol.state(t), atol=1e-12)
    np.testing.assert_allclose(Ux @ x + Uy @ y, sol.control(t), atol=1e-12)


def test_profiles_follow_smoothstep(di4):
    _, cm, es = di4
    t = np.array([0.0, 0.2, 0.4, 0.5, 0.8, 1.0])
    Kx, Ky = reduced_profiles(cm, es, t)
    for k, tk in enumerate(t):
        np.testing.assert_allclose(Ky[k], smoothstep(tk) * np.eye(2), atol=1e-12)
        np.testing.assert_allclose(Kx[k], (1 - smoothstep(tk)) * np.eye(2), atol=1e-12)
    assert np.all(Ky[3] == 0.5 * np.eye(2))


def test_single_integrator_profiles_are_linear():
    sys = LTISystem(np.zeros((2, 2)), np.eye(2))
    cm, es = cost_model(sys), equilibrium_space(sys)
    t = np.linspace(0, 1, 6)
    _, Ky = reduced_profiles(cm, es, t)
    np.testing.assert_allclose(Ky[:, 0, 0], t, atol=1e-13)


def test_peak_speed_ratio(di4):
    _, cm, es = di4
    src, dst = np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[3.0, 4.0], [1.0, 2.0]])
    t = np.linspace(0, 1, 101)
    speed = particle_speeds(cm, es, src, dst, t)
    dist = np.linalg.norm(dst - src, axis=1)
    np.testing.assert_allclose(speed.max(axis=0), 1.5 * dist, rtol=1e-9)
    np.testing.assert_allclose(speed[[0, -1]], 0.0, atol=1e-12)
    pos = particle_positions(cm, es, src, dst, [0.5])
    np.testing.assert_allclose(pos[0], 0.5 * (src + dst), atol=1e-15)


def test_time_labels():
    assert [time_label(t) for t in DEFAULT_TIMES] == ["T0", "T1-5", "T2-5", "T3-5", "T4-5", "T1"]
    assert time_label(0.5) == "T1-2"


def test_worker_count_respects_env(monkeypatch):
    monkeypatch.setenv("EQOT_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("EQOT_THREADS")
    assert worker_count(3) == 3


def test_displacement_frames(di4, tmp_path):
    _, cm, es = di4
    rng = np.random.default_rng(4)
    src = rng.uniform(0.1, 0.4, size=(200, 2))
    dst = src + 0.5
    w = np.full(200, 1 / 200)
    fs = displacement_interpolate(cm, es, src, dst, w, resolution=32, domain=[[0, 1], [0, 1]], workers=2)
    assert len(fs.frames) == 6
    for fr in fs.frames:
        assert abs(fr.mass - 1.0) < 1e-12 and fr.clipped_mass == 0.0
    entries = fs.write(tmp_path, "DI", write_positions=True)
    assert entries[1]["file"] == "frame_1_T1-5_DI.pgm"
    assert read_pgm(tmp_path / entries[1]["file"]).shape == (32, 32)
    assert (tmp_path / entries[1]["positions"]).exists()
