import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfsc import control as ctl
from mfsc.control import (ControlProblem, InadmissiblePerturbation, LambdaNotConstantNegative,
                          MemoryFunctional, NotConcave, OffsetOutOfRange, Perturbation)
from mfsc.forward import CoefficientSpec, constant, simulate
from mfsc.grid import SingularControl, make_grid
from mfsc.measures import law_derivative
from mfsc.registry import PROBLEMS


def const(c):
    return lambda t, x, z, m, xi: np.full(np.shape(x), float(c))


ZERO = const(0.0)
ONE = const(1.0)


# ------------------------------------------------------------------ memory duals

def test_averaging_dual_of_constant_is_window_length():
    g = make_grid(1.0, 0.01, 0.3)
    p = np.ones(g.n_steps + g.delay_steps + 1)
    assert ctl.dual_operator(MemoryFunctional.averaging(), p, 20, g) == pytest.approx(0.3)


def test_evaluation_dual_reads_ahead():
    g = make_grid(1.0, 0.01, 0.3)
    p = np.random.default_rng(0).normal(size=g.n_steps + g.delay_steps + 1)
    assert ctl.dual_operator(MemoryFunctional.evaluation(0.12), p, 40, g) == pytest.approx(p[52])


def test_evaluation_offset_outside_window():
    g = make_grid(1.0, 0.01, 0.3)
    with pytest.raises(OffsetOutOfRange):
        MemoryFunctional.evaluation(0.5).weights(g)


def test_dual_needs_process_through_window():
    g = make_grid(1.0, 0.01, 0.3)
    with pytest.raises(ValueError):
        ctl.dual_operator(MemoryFunctional.averaging(), np.ones(g.n_steps + 1), 95, g)


@pytest.mark.parametrize("functional", [MemoryFunctional.averaging(lambda r: np.exp(-r)),
                                        MemoryFunctional.evaluation(0.1)])
def test_riesz_identity_on_random_pairs(functional):
    g = make_grid(1.0, 0.01, 0.2)
    rng = np.random.default_rng(4)
    shape = (50, g.n_steps + 1)
    p = np.cumsum(rng.normal(scale=0.1, size=shape), axis=1)
    y = np.cumsum(rng.normal(scale=0.1, size=shape), axis=1)
    lhs, rhs = ctl.riesz_sides(functional, p, y, g)
    assert abs(lhs - rhs) <= 3 * g.dt


def test_memory_features_match_functional():
    g = make_grid(1.0, 0.1, 0.3)
    prob = ControlProblem(b=ZERO, sigma=ZERO, alpha=1.0, memory=(MemoryFunctional.evaluation(0.3),))
    ens = prob.simulate(None, g, 2)
    assert np.allclose(prob.memory_features(ens), 1.0)


# ------------------------------------------------------------------ Hamiltonian

def test_hamiltonian_with_zero_coefficients():
    prob = ControlProblem(b=ZERO, sigma=ZERO, h=lambda t, x: np.full(np.shape(x), 0.7), lam=-2.0)
    hv = ctl.hamiltonian(prob, 0.1, [0.3], [[]], [0.0, 0.0], 0.0, 1.5, 0.4, [0.0, 0.0], [0, 0])
    assert hv.h0[0] == 0.0
    assert hv.singular_density[0] == pytest.approx(-2.0 * 1.5 + 0.7)


def test_hamiltonian_linear_assembly():
    prob = ControlProblem(b=const(2), sigma=const(3), f=const(1))
    hv = ctl.hamiltonian(prob, 0.0, [0.0], [[]], [0.0, 0.0], 0.0, 1.0, 1.0, [0.0, 0.0], [5.0, 5.0])
    assert hv.h0[0] == 6.0
    assert np.allclose(hv.recomposed(), hv.h0, atol=1e-12)


def test_hamiltonian_moment_term_uses_law_derivative():
    g = make_grid(1.0, 0.01, 0.0)
    ens = simulate(CoefficientSpec(constant(1.0), constant(0.0)), None, g, 8)
    dm = law_derivative(ens, 50)
    prob = ControlProblem(b=ZERO, sigma=ZERO)
    hv = ctl.hamiltonian(prob, 0.5, [0.0], [[]], ens.moments()[50], 0.0, 0.0, 0.0, [1.0, 0.0], dm)
    assert hv.parts["p1_dm"][0] == pytest.approx(1.0, rel=0.02)


# ------------------------------------------------------------------ adjoints

def test_linear_bequest_gives_unit_adjoint():
    prob = ControlProblem(b=ZERO, sigma=ZERO, g=lambda x, m: x)
    ens = prob.simulate(None, make_grid(1.0, 0.01, 0.0), 16)
    adj = ctl.solve_adjoints(prob, ens)
    assert np.allclose(adj.p0, 1.0) and np.allclose(adj.q0, 0.0) and np.allclose(adj.p1, 0.0)


def test_quadratic_bequest_adjoint_is_martingale():
    prob = PROBLEMS["monotone_follower"].factory({"x0": 0.0})
    g = make_grid(1.0, 0.01, 0.0)
    ens = prob.simulate(None, g, 2 ** 12, 8)
    adj = ctl.solve_adjoints(prob, ens)
    for k in (10, 50, 90):
        slope = np.polyfit(ens.X[:, k], adj.p0[:, k], 1)[0]
        assert slope == pytest.approx(-2.0, rel=0.02)
    assert np.median(adj.q0[:, :-1]) == pytest.approx(-2.0, rel=0.02)
    assert np.all(adj.q0[:, -1] == 0.0)


def test_mean_bequest_gives_constant_moment_adjoint():
    prob = ControlProblem(b=ZERO, sigma=ONE, g=lambda x, m: x - m[0] ** 2, n_moments=1)
    ens = prob.simulate(None, make_grid(1.0, 0.01, 0.0), 1024, 2)
    adj = ctl.solve_adjoints(prob, ens)
    terminal = -2 * ens.moments(1)[-1, 0]
    assert np.allclose(adj.p1[..., 0], terminal, atol=1e-10)


# ------------------------------------------------------------------ directional derivatives

def _small_case(prob, n=512, policy=None):
    g = make_grid(1.0, 0.01, 0.0)
    ens = prob.simulate(policy, g, n, 5)
    return g, ens, ctl.solve_adjoints(prob, ens)


def test_zero_perturbation_has_zero_derivative():
    prob = PROBLEMS["monotone_follower"].factory({})
    g, ens, adj = _small_case(prob, policy=ctl.ReflectionPolicy(0.5, 0.0, 1.0, -1.0))
    est = ctl.directional_derivative(prob, ens, adj, Perturbation(np.zeros(g.n_steps + 1)))
    assert est.value == 0.0


def test_density_identically_zero_gives_zero_derivative():
    lam0 = 1.5
    prob = ControlProblem(b=ZERO, sigma=ZERO, g=lambda x, m: x, lam=-lam0,
                          h=lambda t, x: np.full(np.shape(x), lam0))
    g, ens, adj = _small_case(prob, n=8)
    rng = np.random.default_rng(1)
    eta = np.cumsum(rng.uniform(0, 1, g.n_steps + 1))
    assert ctl.directional_derivative(prob, ens, adj, Perturbation(eta)).value == 0.0


def test_decreasing_perturbation_of_zero_control_is_inadmissible():
    prob = PROBLEMS["monotone_follower"].factory({})
    g, ens, adj = _small_case(prob, n=8)
    with pytest.raises(InadmissiblePerturbation):
        ctl.directional_derivative(prob, ens, adj, Perturbation(-np.ones(g.n_steps + 1)))


def test_canonical_perturbations_are_admissible():
    prob = PROBLEMS["monotone_follower"].factory({})
    g, ens, _ = _small_case(prob, policy=ctl.ReflectionPolicy(0.5, 0.0, 1.0, -1.0))
    etas = ctl.canonical_perturbations(ens.xi, g, 0.5)
    assert [e.name for e in etas] == ["jump", "scale_up", "scale_down"]
    for e in etas:
        e.check(ens.xi)


def test_memory_problem_derivative_matches_finite_difference():
    prob = PROBLEMS["memory_harvest"].factory({"kappa": 0.8, "c": 0.3})
    g = make_grid(1.0, 0.01, 0.2)
    ens = prob.simulate(ctl.ReflectionPolicy(0.8, 0.0, 1.0, -1.0), g, 2048, 3)
    adj = ctl.solve_adjoints(prob, ens)
    table = ctl.derivative_table(prob, ens, adj, ctl.canonical_perturbations(ens.xi, g, 0.5))
    assert ctl.derivatives_ok(table)
    assert all(r["ok"] for r in table if r["perturbation"] == "jump")


def test_law_dependent_problem_needs_mean_field_feedback():
    prob = PROBLEMS["memory_harvest"].factory({"kappa": 0.8, "c": 0.3, "mean_weight": 1.0})
    g = make_grid(1.0, 0.01, 0.2)
    ens = prob.simulate(ctl.ReflectionPolicy(0.8, 0.0, 1.0, -1.0), g, 2048, 3)
    etas = ctl.canonical_perturbations(ens.xi, g, 0.5)
    plain = ctl.derivative_table(prob, ens, ctl.solve_adjoints(prob, ens), etas)
    full = ctl.derivative_table(prob, ens,
                                ctl.solve_adjoints(prob, ens, mean_field_feedback=True), etas)
    assert not ctl.derivatives_ok(plain)
    assert ctl.derivatives_ok(full)


def test_mean_field_drift_derivative_with_feedback():
    prob = ControlProblem(b=lambda t, x, z, m, xi: 0.5 * (m[0] - x) + 0.2 * m[1],
                          sigma=lambda t, x, z, m, xi: np.full(np.shape(x), 0.4),
                          f=lambda t, x, z, m, xi: -0.5 * x * x,
                          g=lambda x, m: -x * x, h=lambda t, x: np.full(np.shape(x), -0.2),
                          lam=-1.0, alpha=0.8, n_moments=2)
    g = make_grid(1.0, 0.01, 0.0)
    ens = prob.simulate(ctl.ReflectionPolicy(0.6, 0.0, 1.0, -1.0), g, 2048, 6)
    adj = ctl.solve_adjoints(prob, ens, mean_field_feedback=True)
    table = ctl.derivative_table(prob, ens, adj, ctl.canonical_perturbations(ens.xi, g, 0.3))
    assert ctl.derivatives_ok(table)


# ------------------------------------------------------------------ optimality checks

def test_never_harvesting_passes_when_harvesting_is_costly():
    prob = PROBLEMS["costly_harvest"].factory({"c": 5.0})
    g, ens, adj = _small_case(prob)
    rep = ctl.check_necessary(prob, ens, adj)
    assert rep["ok"] and rep["complementarity_sum"] == 0.0
    assert rep["max_violation_sign_condition"] < 0


def test_linear_bequest_is_concave():
    prob = ControlProblem(b=ZERO, sigma=ZERO, g=lambda x, m: 3 * x)
    g, ens, adj = _small_case(prob, n=16)
    rep = ctl.check_sufficient(prob, ens, adj, n_probes=200)
    assert rep["concave"] and rep["concavity_max_curvature"] <= 1e-6


def test_quadratic_penalty_is_concave():
    prob = PROBLEMS["monotone_follower"].factory({})
    g, ens, adj = _small_case(prob, n=64)
    rep = ctl.check_sufficient(prob, ens, adj, n_probes=300)
    assert rep["terminal_max_curvature"] <= 1e-6 and rep["concave"]


def test_convex_bequest_rejected():
    prob = ControlProblem(b=ZERO, sigma=ONE, g=lambda x, m: x * x, lam=-1.0)
    g, ens, adj = _small_case(prob, n=64)
    with pytest.raises(NotConcave):
        ctl.check_sufficient(prob, ens, adj, n_probes=100)
    rep = ctl.check_sufficient(prob, ens, adj, n_probes=100, raise_on_fail=False)
    assert not rep["concave"]


def test_control_report_keys():
    prob = PROBLEMS["costly_harvest"].factory({})
    g, ens, adj = _small_case(prob, n=64)
    suff = ctl.check_sufficient(prob, ens, adj, n_probes=50)
    table = ctl.derivative_table(prob, ens, adj, ctl.canonical_perturbations(ens.xi, g, 0.5)[:1])
    rep = ctl.control_report(suff, suff, table)
    assert set(rep) == {"max_violation_sign_condition", "complementarity_sum",
                        "concavity_max_curvature", "deriv_vs_fd_table"}


# ------------------------------------------------------------------ threshold search

def test_costless_harvest_with_penalty_picks_lowest_level():
    # upward drift from above every level: each threshold binds and X(T) ends near it
    prob = ControlProblem(b=const(2.0), sigma=const(0.1), g=lambda x, m: -x * x, lam=-1.0,
                          alpha=1.0, n_moments=1)
    res = ctl.optimize_threshold(prob, [0.0, 0.5, 1.0], make_grid(1.0, 0.01, 0.0), 1024)
    assert res.best_level == 0.0


def test_costly_harvest_picks_highest_level():
    prob = ControlProblem(b=ZERO, sigma=ONE, h=lambda t, x: np.full(np.shape(x), -100.0),
                          lam=-1.0, alpha=0.0, n_moments=1)
    res = ctl.optimize_threshold(prob, [0.0, 0.5, 1.0], make_grid(1.0, 0.01, 0.0), 1024)
    assert res.best_level == 1.0 and not res.level_interior


def test_threshold_search_rejects_positive_lambda():
    prob = ControlProblem(b=ZERO, sigma=ONE, lam=1.0)
    with pytest.raises(LambdaNotConstantNegative):
        ctl.optimize_threshold(prob, [0.0, 1.0], make_grid(1.0, 0.1, 0.0), 8)


@settings(max_examples=20, deadline=None)
@given(level=st.floats(-1, 2), slope=st.floats(0, 5))
def test_reflection_keeps_state_below_boundary(level, slope):
    g = make_grid(1.0, 0.05, 0.0)
    prob = ControlProblem(b=ZERO, sigma=ONE, lam=-1.0, alpha=1.0, n_moments=1)
    pol = ctl.ReflectionPolicy(level, slope, 1.0, -1.0)
    ens = prob.simulate(pol, g, 64, 1)
    bound = np.array([pol.boundary(t) for t in g.times])
    assert np.all(ens.X <= bound + 1e-12)
    assert np.all(np.diff(ens.xi, axis=1) >= 0)


# ------------------------------------------------------------------ stopping connection

def test_connection_without_harvest():
    prob = PROBLEMS["costly_harvest"].factory({"c": 5.0})
    g, ens, adj = _small_case(prob, n=256)
    conn = ctl.assemble_stopping_connection(prob, ens, adj)
    assert np.all(conn.solution.K == 0.0)
    assert np.all(conn.solution.Y >= conn.barrier.S)
    rep = ctl.verify_connection(conn, ens, 5 * g.dt)
    assert rep["ok"] and rep["tau_agreement_rate"] == 1.0
    assert np.all(conn.first_move == g.n_steps)


def test_connection_rejects_positive_lambda():
    prob = ControlProblem(b=ZERO, sigma=ONE, g=lambda x, m: x, lam=1.0)
    g, ens, adj = _small_case(prob, n=16)
    with pytest.raises(LambdaNotConstantNegative):
        ctl.assemble_stopping_connection(prob, ens, adj)
