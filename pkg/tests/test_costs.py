import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqot.costs import (
    LQ,
    ReducedCost,
    RunningCostSpec,
    convexity_certificate,
    cost_model,
    lq_cost,
    min_energy_cost,
    q_structure_residual,
    quadratic_form_extract,
    reduced_quadratic,
    running_cost,
    translation_invariance_probe,
)
from eqot.errors import DimensionError, NotEndpointQuadraticError
from eqot.linsys import LTISystem, embed, equilibrium_space
from oracles import DI4_A, DI4_B, DI_A, DI_B, closed_form_di_energy, scalar_lq_cost, transcription_min_energy


@pytest.fixture(scope="module")
def di():
    sys = LTISystem(DI_A, DI_B)
    return sys, cost_model(sys), equilibrium_space(sys)


@pytest.fixture(scope="module")
def di4():
    sys = LTISystem(DI4_A, DI4_B)
    return sys, cost_model(sys), equilibrium_space(sys)


@pytest.mark.parametrize("dist", [1.0, 0.37, -2.5])
def test_rest_to_rest_cost_three_ways(di, dist):
    _, cm, _ = di
    x, y = np.zeros(2), np.array([dist, 0.0])
    c = min_energy_cost(cm, x, y)
    assert abs(c - 12 * dist**2) <= 1e-8 * 12 * dist**2
    assert abs(closed_form_di_energy(dist) - c) <= 1e-8 * c
    assert abs(transcription_min_energy(DI_A, DI_B, x, y, N=1000) - c) <= 1e-3 * c


def test_min_energy_cost_vectorized_and_nonnegative(di4):
    sys, cm, _ = di4
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    vals = cm.cost(X, Y)
    assert vals.shape == (50,) and np.all(vals >= 0)
    assert abs(vals[3] - cm.cost(X[3], Y[3])) < 1e-12 * vals[3]
    assert cm.cost(X[0], sys.expA @ X[0]) < 1e-20
    with pytest.raises(DimensionError):
        cm.cost(np.zeros(3), np.zeros(3))


def test_scalar_lq_closed_form():
    sys = LTISystem([[0.0]], [[1.0]])
    cm = cost_model(sys, RunningCostSpec(LQ, Q=[[1.0]], Ru=[[1.0]]))
    rng = np.random.default_rng(2)
    for x, y in rng.normal(size=(20, 2)) * 2:
        ref = scalar_lq_cost(x, y)
        assert abs(lq_cost(cm, [x], [y]) - ref) <= 1e-8 * ref


def test_lq_with_zero_state_weight_equals_min_energy(di4):
    sys, cm_me, _ = di4
    cm_lq = cost_model(sys, RunningCostSpec(LQ, Q=np.zeros((4, 4))))
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
    np.testing.assert_allclose(cm_lq.cost(X, Y), cm_me.cost(X, Y), rtol=1e-8)


def test_lq_respects_input_weight():
    sys = LTISystem(DI_A, DI_B)
    base = cost_model(sys)
    heavy = cost_model(sys, RunningCostSpec(LQ, Q=np.zeros((2, 2)), Ru=[[3.0]]))
    x, y = np.array([0.2, -1.0]), np.array([1.0, 0.5])
    assert abs(heavy.cost(x, y) - 3.0 * base.cost(x, y)) < 1e-8 * base.cost(x, y)


def test_reduced_quadratic_double_integrator(di, di4):
    _, cm, es = di
    rc = reduced_quadratic(cm, es)
    np.testing.assert_allclose(rc.M, [[12.0]], rtol=1e-10)
    _, cm4, es4 = di4
    rc4 = reduced_quadratic(cm4, es4)
    np.testing.assert_allclose(rc4.M, 12 * np.eye(2), rtol=1e-10, atol=1e-10)
    assert abs(convexity_certificate(rc4) - 12.0) < 1e-9


def test_reduced_quadratic_by_polarization_for_conforming_lq(di4):
    sys, cm_me, es = di4
    Q = np.diag([0.0, 1.0, 0.0, 2.0])  # weights velocities only
    cm = cost_model(sys, RunningCostSpec(LQ, Q=Q))
    assert q_structure_residual(cm.spec, es) < 1e-15
    rc = reduced_quadratic(cm, es)
    assert rc.provenance == "polarization"
    rng = np.random.default_rng(4)
    wx, wy = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    np.testing.assert_allclose(rc(wx, wy), cm.cost(embed(es, wx), embed(es, wy)), rtol=1e-8)
    assert convexity_certificate(rc) > 12.0  # extra state penalty can only add cost


def test_state_weight_on_equilibria_is_rejected(di4):
    sys, _, es = di4
    cm = cost_model(sys, RunningCostSpec(LQ, Q=np.eye(4)))
    assert q_structure_residual(cm.spec, es) > 0.1
    assert translation_invariance_probe(cm, es) > 1e-3
    with pytest.raises(NotEndpointQuadraticError):
        reduced_quadratic(cm, es)


def test_translation_invariance_for_min_energy(di4):
    _, cm, es = di4
    assert translation_invariance_probe(cm, es) <= 1e-8
    assert translation_invariance_probe(cm, es, shifts=False) == 0.0


def test_quadratic_form_double_integrator(di):
    _, cm, es = di
    form = quadratic_form_extract(cm, es)
    np.testing.assert_allclose(form.Dm, [[12.0]], rtol=1e-9)
    np.testing.assert_allclose(form.Em, [[24.0]], rtol=1e-9)
    np.testing.assert_allclose(form.Fm, [[12.0]], rtol=1e-9)


def test_quadratic_form_scalar_lq():
    sys = LTISystem([[0.0]], [[1.0]])
    cm = cost_model(sys, RunningCostSpec(LQ, Q=[[1.0]]))
    form = quadratic_form_extract(cm, equilibrium_space(sys))
    coth, csch = np.cosh(1) / np.sinh(1), 1 / np.sinh(1)
    np.testing.assert_allclose(form.Dm, [[coth]], rtol=1e-8)
    np.testing.assert_allclose(form.Fm, [[coth]], rtol=1e-8)
    np.testing.assert_allclose(form.Em, [[2 * csch]], rtol=1e-8)


def test_reduced_cost_matrix_exact_on_coincident_points():
    rc = ReducedCost(np.array([[2.0, 0.5], [0.5, 1.0]]))
    X = np.random.default_rng(5).normal(size=(6, 2))
    C = rc.cost_matrix(X, X)
    assert np.all(np.diag(C) == 0.0)
    ref = np.array([[rc(a, b) for b in X] for a in X])
    np.testing.assert_allclose(C, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(rc.scaled(3.0).cost_matrix(X, X), 3 * C, rtol=1e-12)


def test_running_cost_spec_validation():
    with pytest.raises(ValueError):
        RunningCostSpec("quartic")
    with pytest.raises(ValueError):
        RunningCostSpec(LQ, Q=[[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        RunningCostSpec(LQ, Q=-np.eye(2))
    with pytest.raises(ValueError):
        RunningCostSpec(LQ, Ru=[[0.0]])
    with pytest.raises(ValueError):
        RunningCostSpec("min_energy", Q=np.eye(2))
    with pytest.raises(DimensionError):
        RunningCostSpec(LQ, Q=np.eye(3)).weights(2, 1)


def test_running_cost_pointwise():
    spec = RunningCostSpec(LQ, Q=np.diag([1.0, 2.0]), Ru=[[3.0]])
    Q, Ru = spec.weights(2, 1)
    val = running_cost(spec, Q, Ru, np.array([[1.0, 1.0]]), np.array([[2.0]]))
    assert val[0] == pytest.approx(1 + 2 + 12)


@given(
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
)
@settings(max_examples=60, deadline=None)
def test_min_energy_cost_on_equilibria_is_symmetric_and_shift_invariant(wx, wy, wz):
    sys = LTISystem(DI4_A, DI4_B)
    cm = cost_model(sys)
    es = equilibrium_space(sys)
    x, y, z = embed(es, np.array(wx)), embed(es, np.array(wy)), embed(es, np.array(wz))
    c = cm.cost(x, y)
    assert abs(cm.cost(y, x) - c) <= 1e-9 * (1 + c)
    assert abs(cm.cost(x + z, y + z) - c) <= 1e-9 * (1 + c)
