import numpy as np
import pytest

from mfsc.forward import CoefficientSpec, constant, simulate
from mfsc.grid import make_grid
from mfsc.rbsde import BarrierSpec, DriverSpec, RbsdeSolution, solve_picard
from mfsc.stopping import (MarkovSpec, NotMarkovReducible, StoppingProblem, dp_oracle,
                           hitting_time, k_increase_time, k_runningmax_check, snell_check,
                           stopped_values, stopping_report)

DT = 0.01
zero_driver = DriverSpec(lambda t, x, y, z, yb, zb, law: np.zeros_like(x), C=0.0, c=0.0,
                         uses_advanced=False)
decay = DriverSpec(lambda t, x, y, z, yb, zb, law: -y, C=1.0, c=0.0, uses_advanced=False)


def still(n=1):
    return simulate(CoefficientSpec(constant(0.0), constant(0.0)), None, make_grid(1.0, DT), n)


@pytest.fixture(scope="module")
def brownian_case():
    """Brownian state, F = -y, S = 0.2 + 0.3 t, R = 0.5 + 0.5 clip(X_T, 0, 1)."""
    ens = simulate(CoefficientSpec(constant(0.0), constant(1.0)), None, make_grid(1.0, DT),
                   2 ** 14, 7)
    g = ens.grid
    bar = BarrierSpec(0.2 + 0.3 * g.times, 0.5 + 0.5 * np.clip(ens.X[:, -1], 0, 1))
    sol = solve_picard(decay, bar, ens)
    markov = MarkovSpec(x0=0.0, sigma=1.0, F=lambda t, x, y: -y,
                        S=lambda t, x: 0.2 + 0.3 * t + 0.0 * x,
                        R=lambda x: 0.5 + 0.5 * np.clip(x, 0, 1))
    return ens, bar, sol, StoppingProblem.from_solution(sol, bar, ens, markov)


def test_never_binding_barrier_stops_at_horizon():
    ens = still(3)
    bar = BarrierSpec(np.full(101, -10.0), 1.0)
    sol = solve_picard(zero_driver, bar, ens)
    assert np.all(hitting_time(sol, bar).index == 100)


def test_rising_barrier_below_value_stops_at_horizon():
    ens = still()
    bar = BarrierSpec(ens.grid.times.copy(), 1.0)
    sol = solve_picard(zero_driver, bar, ens)
    assert hitting_time(sol, bar).index[0] == 100


def test_k_increase_time_without_push():
    sol = RbsdeSolution.zeros(4, make_grid(1.0, DT))
    assert np.all(k_increase_time(sol).index == 100)


def test_k_increase_time_single_push():
    sol = RbsdeSolution.zeros(2, make_grid(1.0, DT))
    sol.dK[:, 37] = 0.1
    sol.K = np.cumsum(sol.dK, axis=1)
    assert np.all(k_increase_time(sol, 5).index == 37)
    assert np.all(k_increase_time(sol, 37).index == 37)
    assert np.all(k_increase_time(sol, 38).index == 100)


def test_deterministic_reflection_pushes_immediately():
    ens = still()
    bar = BarrierSpec(np.full(101, 0.5), 1.0)
    sol = solve_picard(decay, bar, ens)
    assert k_increase_time(sol).index[0] == 0
    assert hitting_time(sol, bar).index[0] == 0


def test_lattice_reproduces_deterministic_examples():
    g = make_grid(1.0, DT)
    X = np.zeros((1, 101))
    reflected = StoppingProblem(F=np.zeros((1, 101)), S=np.full((1, 101), 0.5), R=np.ones(1),
                                X=X, grid=g,
                                markov=MarkovSpec(0.0, 0.0, lambda t, x, y: -y,
                                                  lambda t, x: np.full_like(x, 0.5),
                                                  lambda x: np.ones_like(x)))
    assert dp_oracle(reflected, 500) == 0.5
    free = StoppingProblem(F=np.zeros((1, 101)), S=np.full((1, 101), -10.0), R=np.ones(1),
                           X=X, grid=g,
                           markov=MarkovSpec(0.0, 1.0, lambda t, x, y: 0.0 * y,
                                             lambda t, x: np.full_like(x, -10.0),
                                             lambda x: np.ones_like(x)))
    assert dp_oracle(free, 500) == 1.0


def test_lattice_requires_markov_description():
    g = make_grid(1.0, DT)
    prob = StoppingProblem(F=np.zeros((1, 101)), S=np.zeros((1, 101)), R=np.ones(1),
                           X=np.zeros((1, 101)), grid=g)
    with pytest.raises(NotMarkovReducible):
        dp_oracle(prob)


def test_stopped_value_at_horizon_is_terminal_plus_running():
    g = make_grid(1.0, DT)
    prob = StoppingProblem(F=np.ones((2, 101)), S=np.zeros((2, 101)), R=np.array([1.0, 2.0]),
                           X=np.zeros((2, 101)), grid=g)
    v = stopped_values(prob, np.array([100, 50]))
    assert v == pytest.approx([2.0, 0.5])


def test_value_matches_lattice(brownian_case):
    ens, bar, sol, prob = brownian_case
    oracle = dp_oracle(prob, 2000)
    snell = snell_check(prob, sol, barrier=bar)
    assert abs(sol.Y[:, 0].mean() - oracle) <= 0.01 * abs(oracle) + 3 * snell["value_se"]


def test_hitting_and_push_times_agree(brownian_case):
    ens, bar, sol, prob = brownian_case
    agree = np.mean(hitting_time(sol, bar).index == k_increase_time(sol).index)
    assert agree >= 0.99


def test_running_max_formula(brownian_case):
    ens, bar, sol, prob = brownian_case
    rep = k_runningmax_check(prob, sol)
    assert rep["k_formula_gap"] <= 5 * DT + 3 * rep["k_formula_se"]


def test_threshold_rules_do_not_beat_hitting_time(brownian_case):
    ens, bar, sol, prob = brownian_case
    snell = snell_check(prob, sol, barrier=bar, n_candidate=30)
    assert snell["candidate_excess"] <= 3 * snell["candidate_se"]


def test_report_fields(brownian_case):
    ens, bar, sol, prob = brownian_case
    rep = stopping_report(prob, sol, bar, n_states=500)
    assert set(rep) >= {"y0", "y0_oracle", "tau_agreement_rate", "k_formula_gap"}
