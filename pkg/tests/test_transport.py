import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqot.costs import ReducedCost, cost_model
from eqot.errors import ConvergenceError, DimensionError, NotStrictlyConvexError
from eqot.linsys import LTISystem, equilibrium_space
from eqot.measures import DiscreteMeasure, MeasureSpec
from eqot.transport import (
    SolverParams,
    TransportProblem,
    assignment_duals,
    barycentric_map,
    choose_backend,
    exact_assignment,
    monotone_1d,
    sinkhorn,
    solve_reduced,
    solve_transport,
)
from oracles import DI4_A, DI4_B, brute_force_assignment, sorted_matching_cost

UNIT = [[0.0, 1.0], [0.0, 1.0]]


def cloud(points, weights=None):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 1 and pts.ndim == 2 and np.asarray(points).ndim == 1:
        pts = pts.T
    n = pts.shape[0]
    return DiscreteMeasure(pts, np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float))


def test_exact_matches_brute_force_on_small_suite():
    rng = np.random.default_rng(11)
    for _ in range(30):
        C = rng.random((7, 7))
        sol = exact_assignment(C)
        best, _ = brute_force_assignment(C)
        assert abs(sol.total_cost - best) < 1e-12
        u, v = sol.potentials
        assert (C - u[:, None] - v[None, :]).min() > -1e-12
        assert abs(sol.duality_gap) < 1e-12


def test_exact_tie_break_examples():
    assert list(exact_assignment(np.array([[0.0, 1.0], [1.0, 0.0]])).permutation) == [0, 1]
    assert list(exact_assignment(np.array([[1.0, 0.0], [0.0, 1.0]])).permutation) == [1, 0]
    tie = exact_assignment(np.ones((3, 3)))
    assert list(tie.permutation) == [0, 1, 2]


def test_exact_multilevel_agrees_with_direct():
    rng = np.random.default_rng(12)
    X = rng.random((600, 2))
    Y = rng.random((600, 2)) + [0.5, 0.0]
    C = ((X[:, None] - Y[None]) ** 2).sum(-1)
    a = exact_assignment(C)
    b = exact_assignment(C, base=10**6)
    assert a.total_cost == pytest.approx(b.total_cost, rel=1e-13)
    assert a.info["min_reduced_cost"] > -1e-11


def test_assignment_duals_reject_suboptimal_permutation():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ConvergenceError):
        assignment_duals(C, np.array([1, 0]))


def test_exact_rejects_bad_input():
    with pytest.raises(DimensionError):
        exact_assignment(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        exact_assignment(np.array([[np.nan, 0.0], [0.0, 0.0]]))


def test_scaling_invariance_of_permutation():
    rng = np.random.default_rng(13)
    X, Y = rng.random((64, 2)), rng.random((64, 2))
    rc = ReducedCost(np.eye(2))
    C = rc.cost_matrix(X, Y)
    base = exact_assignment(C).permutation
    for alpha in (0.5, 12.0, 1e3):
        np.testing.assert_array_equal(exact_assignment(rc.scaled(alpha).cost_matrix(X, Y)).permutation, base)


def test_optimal_permutation_is_cyclically_monotone():
    rng = np.random.default_rng(14)
    X, Y = rng.random((40, 2)), rng.random((40, 2))
    C = ReducedCost(np.eye(2)).cost_matrix(X, Y)
    perm = exact_assignment(C).permutation
    matched = C[np.arange(40), perm]
    # no 2-cycle or 3-cycle rerouting lowers the cost
    idx = np.arange(40)
    rerouted = C[idx[:, None], perm[None, :]] + C[idx[None, :], perm[:, None]]
    assert (rerouted - matched[:, None] - matched[None, :]).min() > -1e-12
    for i, j, k in rng.integers(0, 40, size=(500, 3)):
        if len({i, j, k}) < 3:
            continue
        before = matched[i] + matched[j] + matched[k]
        after = C[i, perm[j]] + C[j, perm[k]] + C[k, perm[i]]
        assert after >= before - 1e-12


def test_monotone_1d_matches_sorting():
    rng = np.random.default_rng(15)
    x, y = rng.normal(size=50), rng.normal(size=50) + 2
    rc = ReducedCost([[12.0]])
    sol = monotone_1d(cloud(x), cloud(y), rc)
    assert sol.total_cost == pytest.approx(sorted_matching_cost(x, y, 12.0), rel=1e-12)
    assert sol.total_cost == pytest.approx(exact_assignment(rc.cost_matrix(x[:, None], y[:, None])).total_cost, rel=1e-12)
    f, g = sol.potentials
    C = rc.cost_matrix(x[:, None], y[:, None])
    assert (C - f[:, None] - g[None, :]).min() > -1e-9


def test_monotone_1d_unequal_weights():
    mu = cloud(np.array([0.0, 1.0]), [0.5, 0.5])
    nu = cloud(np.array([2.0, 3.0]), [0.25, 0.75])
    rc = ReducedCost([[12.0]])
    sol = monotone_1d(mu, nu, rc)
    np.testing.assert_allclose(sol.coupling, [[0.25, 0.25], [0.0, 0.5]])
    assert sol.total_cost == pytest.approx(12 * (0.25 * 4 + 0.25 * 9 + 0.5 * 4))
    assert max(sol.marginal_residuals) < 1e-15
    f, g = sol.potentials
    C = rc.cost_matrix(mu.points, nu.points)
    assert (C - f[:, None] - g[None, :]).min() > -1e-12


def test_monotone_requires_line_and_convexity():
    with pytest.raises(DimensionError):
        monotone_1d(cloud([[0.0, 0.0]]), cloud([[1.0, 1.0]]), ReducedCost(np.eye(2)))
    with pytest.raises(NotStrictlyConvexError):
        monotone_1d(cloud(np.array([0.0])), cloud(np.array([1.0])), ReducedCost([[-1.0]]))


def test_sinkhorn_close_to_exact_and_marginals():
    rng = np.random.default_rng(16)
    mu, nu = cloud(rng.random((120, 2))), cloud(rng.random((120, 2)) + 0.3)
    rc = ReducedCost(np.eye(2))
    sol = sinkhorn(TransportProblem(mu, nu, rc), SolverParams())
    ref = exact_assignment(rc.cost_matrix(mu.points, nu.points)).total_cost
    assert abs(sol.total_cost - ref) / ref < 5e-3
    assert max(sol.marginal_residuals) <= 1e-7
    assert sol.coupling.shape == (120, 120)


@pytest.mark.parametrize("max_iterations", [5, 200])
def test_sinkhorn_reports_non_convergence(max_iterations):
    rng = np.random.default_rng(17)
    mu, nu = cloud(rng.random((40, 1))), cloud(rng.random((40, 1)))
    params = SolverParams(epsilon_rel=1e-3, max_iterations=max_iterations, marginal_tolerance=1e-300)
    with pytest.raises(ConvergenceError) as err:
        sinkhorn(TransportProblem(mu, nu, ReducedCost([[1.0]])), params)
    assert err.value.iterations >= max_iterations
    assert len(err.value.residuals) == 2


def test_barycentric_map_of_coupling():
    nu = cloud(np.array([[0.0], [1.0]]))
    sol = monotone_1d(cloud(np.array([[0.5]])), nu, ReducedCost([[1.0]]))
    np.testing.assert_allclose(barycentric_map(sol, nu, [1.0]), [[0.5]])


def test_backend_selection():
    a, b = cloud(np.zeros((4, 1))), cloud(np.ones((4, 1)))
    assert choose_backend(a, b, SolverParams()) == "exact"
    assert choose_backend(a, b, SolverParams(exact_cap=2)) == "entropic"
    assert choose_backend(a, cloud(np.ones((3, 1))), SolverParams()) == "entropic"
    assert choose_backend(a, b, SolverParams(backend="monotone")) == "monotone"
    with pytest.raises(ValueError):
        SolverParams(backend="simplex")
    with pytest.raises(DimensionError):
        solve_reduced(a, cloud(np.ones((3, 1))), ReducedCost([[1.0]]), SolverParams(backend="exact"))


def test_solve_transport_pipeline():
    sys = LTISystem(DI4_A, DI4_B)
    cm, es = cost_model(sys), equilibrium_space(sys)
    mu = MeasureSpec.disks([(0.25, 0.75), (0.75, 0.25)], 0.125, domain=UNIT)
    res = solve_transport(cm, es, mu, mu, n=64, seed=2)
    assert res.solution.total_cost == 0.0
    np.testing.assert_array_equal(res.map_points, res.mu.points)
    np.testing.assert_allclose(res.src_states @ DI4_A.T, 0.0, atol=1e-15)
    with pytest.raises(DimensionError):
        solve_transport(cm, es, MeasureSpec.point_cloud([[0.0], [1.0]]), mu, n=4)


@given(st.integers(0, 10**6), st.integers(2, 6))
@settings(max_examples=30, deadline=None)
def test_exact_euclidean_coincidence(seed, n):
    # a positive multiple of the squared Euclidean cost has the same optimal matching
    rng = np.random.default_rng(seed)
    X, Y = rng.random((n, 2)), rng.random((n, 2))
    e = ReducedCost(np.eye(2)).cost_matrix(X, Y)
    d = ReducedCost(12 * np.eye(2)).cost_matrix(X, Y)
    best, _ = brute_force_assignment(e)
    sol = exact_assignment(d)
    assert abs(sol.total_cost - 12 * best) <= 1e-12 * max(1.0, 12 * best)
    np.testing.assert_array_equal(sol.permutation, exact_assignment(e).permutation)
