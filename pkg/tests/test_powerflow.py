import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualopf.case_io import build_network, parse_case
from dualopf.opf_model import SplitLayout, pf_problem
from dualopf.powerflow import (
    FDPFFactors,
    NotConvergedInput,
    PFProblem,
    SingularJacobian,
    fdpf_factors,
    jacobian,
    residuals,
    sensitivity,
    solve,
    solve_fdpf,
    solve_nr,
)

from conftest import random_network, three_bus, two_bus


def nominal_problem(net, scale=1.0):
    y = np.concatenate([net.pg0[:-1], net.vg0, [0.0]])
    return pf_problem(SplitLayout(net), scale * net.nominal_load, y)


def two_bus_problem(p=0.1, v1=1.0):
    net = two_bus(pd=100 * p, v1=v1)
    return PFProblem(net, np.array([-p]), np.array([0.0]), np.array([v1]))


def two_bus_closed_form(p, v1=1.0):
    """Lossless line x=0.1, load p at unity power factor: V2 = V1 cos(th), sin(2 th) = -p / (5 V1^2)."""
    th = -0.5 * math.asin(p / (5 * v1 * v1))
    return v1 * math.cos(th), th


def fd_jacobian(problem, v, theta, eps=1e-6):
    net = problem.network
    npvpq = len(net.pvpq)
    cols = []
    for k in range(npvpq + len(net.pq)):
        vp, tp, vm, tm = v.copy(), theta.copy(), v.copy(), theta.copy()
        if k < npvpq:
            tp[net.pvpq[k]] += eps
            tm[net.pvpq[k]] -= eps
        else:
            vp[net.pq[k - npvpq]] += eps
            vm[net.pq[k - npvpq]] -= eps
        cols.append((residuals(problem, vp, tp) - residuals(problem, vm, tm)) / (2 * eps))
    return np.array(cols).T


def test_flat_no_load_is_solution():
    net = two_bus(pd=0.0)
    prob = PFProblem(net, np.zeros(1), np.zeros(1), np.array([1.0]))
    v, th = prob.flat_start()
    assert np.linalg.norm(residuals(prob, v, th)) < 1e-14
    sol = solve_nr(prob)
    assert sol.converged and sol.iterations == 0


def test_two_bus_closed_form_residual_vanishes():
    v2, th2 = two_bus_closed_form(0.1)
    prob = two_bus_problem(0.1)
    r = residuals(prob, np.array([1.0, v2]), np.array([0.0, th2]))
    assert np.linalg.norm(r) < 1e-12


@pytest.mark.parametrize("solver", ["nr", "fdpf"])
def test_two_bus_matches_closed_form(solver):
    v2, th2 = two_bus_closed_form(0.1)
    sol = solve(two_bus_problem(0.1), solver, tol=1e-10)
    assert sol.converged
    assert sol.v[1] == pytest.approx(v2, abs=1e-8)
    assert sol.theta[1] == pytest.approx(th2, abs=1e-8)


def test_perturbed_angle_residual_hand_formula():
    v2, th2 = two_bus_closed_form(0.1)
    prob = two_bus_problem(0.1)
    t = th2 + 0.01
    r = residuals(prob, np.array([1.0, v2]), np.array([0.0, t]))
    want = [-0.1 - 10 * v2 * math.sin(t), 0.0 - (-10 * v2 * math.cos(t) + 10 * v2 * v2)]
    np.testing.assert_allclose(r, want, atol=1e-13)


def test_two_bus_jacobian_entry():
    # d(dP2)/d(theta2) = -V1 V2 B12 cos(theta2 - theta1), B12 = 10
    v2, th2 = 0.98, -0.05
    J = jacobian(two_bus_problem(0.1), np.array([1.0, v2]), np.array([0.0, th2])).matrix.toarray()
    assert J[0, 0] == pytest.approx(-10 * v2 * math.cos(th2), rel=1e-12)


def test_flat_ring_angle_block_symmetric():
    text = """
mpc.baseMVA = 100;
mpc.bus = [1 3 0 0 0 0 1 1 0 135 1 1.1 0.9; 2 1 0 0 0 0 1 1 0 135 1 1.1 0.9; 3 1 0 0 0 0 1 1 0 135 1 1.1 0.9];
mpc.gen = [1 0 0 100 -100 1 100 1 200 0];
mpc.branch = [1 2 0.01 0.1 0 0 0 0 0 0 1; 2 3 0.02 0.2 0 0 0 0 0 0 1; 1 3 0.01 0.15 0 0 0 0 0 0 1];
mpc.gencost = [2 0 0 3 0.01 2 0];
"""
    net = build_network(parse_case(text))
    prob = PFProblem(net, np.zeros(2), np.zeros(2), np.array([1.0]))
    J = jacobian(prob, *prob.flat_start()).matrix.toarray()
    np.testing.assert_allclose(J[:2, :2], J[:2, :2].T, atol=1e-14)


@pytest.mark.parametrize("case", ["case30", "case118"])
def test_jacobian_finite_difference_real_cases(case, request):
    net = request.getfixturevalue(case)
    prob = nominal_problem(net)
    rng = np.random.default_rng(3)
    v = 1 + 0.03 * rng.standard_normal(net.n_bus)
    th = 0.1 * rng.standard_normal(net.n_bus)
    J = jacobian(prob, v, th).matrix.toarray()
    fd = fd_jacobian(prob, v, th)
    assert np.abs(J - fd).max() / np.abs(J).max() < 1e-5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 6), seed=st.integers(0, 2 ** 31 - 1), taps=st.booleans())
def test_jacobian_finite_difference_random(n, seed, taps):
    net = random_network(n, seed, taps=taps)
    prob = nominal_problem(net)
    rng = np.random.default_rng(seed)
    v = 1 + 0.05 * rng.standard_normal(n)
    th = 0.1 * rng.standard_normal(n)
    J = jacobian(prob, v, th).matrix.toarray()
    fd = fd_jacobian(prob, v, th)
    assert np.abs(J - fd).max() <= 1e-5 * max(1.0, np.abs(J).max())


@pytest.mark.parametrize("solver", ["nr", "fdpf"])
@pytest.mark.parametrize("case", ["case30", "case118"])
def test_real_case_converges_with_certificate(case, solver, request):
    net = request.getfixturevalue(case)
    prob = nominal_problem(net)
    sol = solve(prob, solver)
    assert sol.converged
    assert np.linalg.norm(residuals(prob, sol.v, sol.theta)) < 1e-5
    assert sol.theta[net.slack] == 0.0
    np.testing.assert_array_equal(sol.v[net.gen_bus], net.vg0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 6), seed=st.integers(0, 2 ** 31 - 1))
def test_nr_and_fdpf_agree_random(n, seed):
    net = random_network(n, seed)
    prob = nominal_problem(net)
    a = solve_nr(prob, tol=1e-8)
    b = solve_fdpf(prob, tol=1e-8)
    assert a.converged and b.converged
    assert a.residual_norm < 1e-5 and b.residual_norm < 1e-5
    np.testing.assert_allclose(a.v, b.v, atol=1e-6)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-6)


def test_warm_start_from_solution_needs_no_iteration(case30):
    prob = nominal_problem(case30)
    sol = solve_nr(prob, tol=1e-9)
    again = solve_nr(prob, start=(sol.v, sol.theta), tol=1e-8)
    assert again.converged and again.iterations == 0


def test_fdpf_reuses_factors(case118):
    prob = nominal_problem(case118)
    fdpf_factors(case118)
    builds = FDPFFactors.builds
    for scale in (0.95, 1.0, 1.05):
        sol = solve_fdpf(nominal_problem(case118, scale))
        assert sol.converged and sol.factorizations == 0
    assert FDPFFactors.builds == builds
    assert solve_nr(prob).factorizations >= 1


def test_fdpf_first_solve_counts_two_factorizations():
    net = random_network(5, 11)
    sol = solve_fdpf(nominal_problem(net))
    assert sol.factorizations == 2
    assert solve_fdpf(nominal_problem(net)).factorizations == 0


def test_fdpf_per_solve_faster_than_nr(case118):
    prob = nominal_problem(case118)
    solve_fdpf(prob)
    solve_nr(prob)

    def best_of(fn, reps=15):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(prob)
            times.append(time.perf_counter() - t0)
        return min(times)

    assert best_of(solve_fdpf) < best_of(solve_nr)


def test_isolated_load_bus_is_singular():
    text = """
mpc.baseMVA = 100;
mpc.bus = [1 3 0 0 0 0 1 1 0 135 1 1.1 0.9; 2 1 10 0 0 0 1 1 0 135 1 1.1 0.9; 3 1 0 0 0 0 1 1 0 135 1 1.1 0.9];
mpc.gen = [1 0 0 100 -100 1 100 1 200 0];
mpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1];
mpc.gencost = [2 0 0 3 0.01 2 0];
"""
    net = build_network(parse_case(text))
    prob = PFProblem(net, np.array([-0.1, 0.0]), np.zeros(2), np.array([1.0]))
    with pytest.raises(SingularJacobian):
        solve_nr(prob)


def test_overload_not_converged():
    prob = two_bus_problem(0.1)
    # beyond the 5 p.u. transfer limit of the x=0.1 line: no solution exists
    heavy = PFProblem(prob.network, np.array([-6.0]), np.array([0.0]), np.array([1.0]))
    sol = solve_nr(heavy)
    assert not sol.converged
    assert np.isfinite(sol.residual_norm)
    with pytest.raises(NotConvergedInput):
        sensitivity(heavy, sol)


def test_bad_tolerance_rejected():
    with pytest.raises(ValueError):
        solve_nr(two_bus_problem(), tol=0.0)
    with pytest.raises(ValueError):
        solve(two_bus_problem(), "gauss")


# ------------------------------------------------------------ sensitivities

def test_slack_voltage_sensitivity_closed_form():
    p, v1 = 0.1, 1.0
    prob = two_bus_problem(p, v1)
    sol = solve_nr(prob, tol=1e-12)
    dz = sensitivity(prob, sol)
    # unknowns (theta2, V2); control columns (V_slack, theta_ref)
    u = p / (5 * v1 ** 2)
    dth = (p / (5 * v1 ** 3)) / math.sqrt(1 - u * u)
    assert dz[0, 0] == pytest.approx(dth, rel=1e-8)
    v2 = lambda a: two_bus_closed_form(p, a)[0]
    assert dz[1, 0] == pytest.approx((v2(v1 + 1e-6) - v2(v1 - 1e-6)) / 2e-6, rel=1e-6)


def _resolve_fd(prob, which, eps):
    def with_delta(d):
        p, v, t = prob.p_injection.copy(), prob.v_setpoint.copy(), prob.theta_ref
        kind, k = which
        if kind == "p":
            p[k] += d
        elif kind == "v":
            v[k] += d
        else:
            t += d
        sol = solve_nr(PFProblem(prob.network, p, prob.q_injection, v, t), tol=1e-13)
        net = prob.network
        return np.concatenate([sol.theta[net.pvpq], sol.v[net.pq]])

    return (with_delta(eps) - with_delta(-eps)) / (2 * eps)


@pytest.mark.parametrize("net_fn", [three_bus, lambda: random_network(6, 4)])
def test_sensitivity_matches_resolve(net_fn):
    net = net_fn()
    prob = nominal_problem(net)
    sol = solve_nr(prob, tol=1e-13)
    S = sensitivity(prob, sol)
    npv = len(net.pv)
    controls = [("p", k) for k in range(npv)] + [("v", k) for k in range(npv + 1)]
    for col, which in enumerate(controls):
        fd = _resolve_fd(prob, which, 1e-5)
        err = np.abs(S[:, col] - fd).max() / max(np.abs(fd).max(), 1e-8)
        assert err < 1e-4, (which, err)


def test_reference_angle_shifts_all_angles(case30):
    prob = nominal_problem(case30)
    sol = solve_nr(prob, tol=1e-10)
    S = sensitivity(prob, sol)
    npvpq = len(case30.pvpq)
    np.testing.assert_allclose(S[:npvpq, -1], 1.0, atol=1e-10)
    np.testing.assert_allclose(S[npvpq:, -1], 0.0, atol=1e-10)
