"""Optimal stopping checks for solved reflected BSDEs.

Given a solution (Y, Z, K) with driver values F, barrier S and terminal R:

* Y(t) should be the value sup_tau E[int_t^tau F ds + S(tau) 1{tau<T} + R 1{tau=T} | F_t];
* tau_t = first time Y <= S, which should coincide with the first time K moves;
* K(T) - K(T - t) = max_{s <= t} {R + int_{T-s}^T F dr - int_{T-s}^T dM - S(T - s)}^-.

The martingale part in the last identity is the discrete martingale increment
dM_k = Y_{k+1} - E[Y_{k+1} | F_k] of the scheme; ``use="brownian"`` swaps in
Z_k dB_k, which differs from dM by the regression residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import TimeGrid
from .rbsde import BarrierSpec, RbsdeSolution
from .regression import Projector

__all__ = [
    "NotMarkovReducible",
    "MarkovSpec",
    "StoppingProblem",
    "StoppingTime",
    "hitting_time",
    "k_increase_time",
    "stopped_values",
    "snell_check",
    "k_runningmax_check",
    "dp_oracle",
    "stopping_report",
]


class NotMarkovReducible(ValueError):
    pass


@dataclass
class MarkovSpec:
    """State X = x0 + mu t + sigma B with driver F(t, x, y), barrier S(t, x), terminal R(x)."""

    x0: float
    sigma: float
    F: Callable
    S: Callable
    R: Callable
    mu: float = 0.0


@dataclass
class StoppingProblem:
    F: np.ndarray            # (N, n+1)
    S: np.ndarray            # (N, n+1)
    R: np.ndarray            # (N,)
    X: np.ndarray            # (N, n+1) state features
    grid: TimeGrid
    markov: MarkovSpec | None = None
    dB: np.ndarray | None = None

    @classmethod
    def from_solution(cls, sol: RbsdeSolution, barrier: BarrierSpec, ensemble,
                      markov: MarkovSpec | None = None) -> "StoppingProblem":
        S, R = barrier.broadcast(sol.Y.shape[0])
        return cls(F=sol.F, S=np.array(S), R=np.array(R), X=ensemble.X, grid=sol.grid,
                   markov=markov, dB=ensemble.dB)


@dataclass
class StoppingTime:
    index: np.ndarray        # per-particle grid index in [t_index, n_steps]
    t_index: int

    def times(self, grid: TimeGrid) -> np.ndarray:
        return self.index * grid.dt


def _first_true(mask: np.ndarray, default: int) -> np.ndarray:
    hit = mask.any(axis=1)
    return np.where(hit, mask.argmax(axis=1), default)


def hitting_time(sol: RbsdeSolution, barrier: BarrierSpec, t_index: int = 0,
                 tol_hit: float | None = None) -> StoppingTime:
    """First grid time >= t_index with Y <= S + tol_hit (n_steps if none)."""
    n = sol.grid.n_steps
    S, _ = barrier.broadcast(sol.Y.shape[0])
    if tol_hit is None:
        tol_hit = 1e-8 * max(1.0, float(np.max(np.abs(sol.Y))))
    mask = sol.Y[:, t_index:] <= S[:, t_index:] + tol_hit
    return StoppingTime(t_index + _first_true(mask, n - t_index), t_index)


def k_increase_time(sol: RbsdeSolution, t_index: int = 0, tol_K: float = 1e-12) -> StoppingTime:
    """First grid time s >= t_index at which K moves, i.e. K(s) > K(t_index-) + tol_K.

    A push is attributed to the grid time where the reflection acts.
    """
    n = sol.grid.n_steps
    k_left = sol.K[:, t_index] - sol.dK[:, t_index]
    mask = sol.K[:, t_index:] > k_left[:, None] + tol_K
    return StoppingTime(t_index + _first_true(mask, n - t_index), t_index)


def stopped_values(prob: StoppingProblem, tau: np.ndarray, t_index: int = 0) -> np.ndarray:
    """Per-particle int_t^tau F ds + S(tau) 1{tau<T} + R 1{tau=T}."""
    n, dt = prob.grid.n_steps, prob.grid.dt
    cum = np.concatenate([np.zeros((prob.F.shape[0], 1)), np.cumsum(prob.F[:, :n] * dt, axis=1)],
                         axis=1)
    rows = np.arange(prob.F.shape[0])
    running = cum[rows, tau] - cum[:, t_index]
    reward = np.where(tau < n, prob.S[rows, np.minimum(tau, n)], prob.R)
    return running + reward


def _threshold_rule(X: np.ndarray, t_index: int, level: float, below: bool, last: int) -> np.ndarray:
    window = X[:, t_index: last + 1]
    mask = window <= level if below else window >= level
    return t_index + _first_true(mask, last - t_index)


def snell_check(prob: StoppingProblem, sol: RbsdeSolution, t_index: int = 0,
                n_candidate: int = 20, seed: int = 0, barrier: BarrierSpec | None = None) -> dict:
    """Compare Y(t) with the value at tau_hat and against random threshold stopping rules.

    Returns ``value_gap`` (mean |E[v(tau_hat) | F_t] - Y(t)|), ``candidate_excess``
    (largest mean advantage of a candidate over tau_hat) with its standard error.
    """
    barrier = barrier or BarrierSpec(prob.S, prob.R, unsafe=True)
    n = prob.grid.n_steps
    tau_hat = hitting_time(sol, barrier, t_index).index
    v_hat = stopped_values(prob, tau_hat, t_index)
    proj = Projector(prob.X[:, t_index])
    cond = proj.project(v_hat)
    gap = float(np.mean(np.abs(cond - sol.Y[:, t_index])))

    rng = np.random.default_rng(seed)
    lo, hi = np.quantile(prob.X[:, t_index:], [0.02, 0.98])
    excess, se, rules = -np.inf, 0.0, []
    for _ in range(n_candidate):
        level = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        below = bool(rng.integers(2))
        last = int(rng.integers(t_index, n + 1))
        tau = _threshold_rule(prob.X, t_index, level, below, last)
        diff = stopped_values(prob, tau, t_index) - v_hat
        m = float(diff.mean())
        s = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
        rules.append({"level": level, "below": below, "last": last, "excess": m, "se": s})
        if m > excess:
            excess, se = m, s
    return {
        "y": float(np.mean(sol.Y[:, t_index])),
        "value_at_tau_hat": float(v_hat.mean()),
        "value_se": float(v_hat.std(ddof=1) / np.sqrt(v_hat.size)) if v_hat.size > 1 else 0.0,
        "value_gap": gap,
        "candidate_excess": float(excess),
        "candidate_se": float(se),
        "candidates": rules,
    }


def k_runningmax_check(prob: StoppingProblem, sol: RbsdeSolution, use: str = "martingale") -> dict:
    """Discrepancy between K(T) - K(T - t) and the running-max formula on the grid."""
    n, dt = prob.grid.n_steps, prob.grid.dt
    if use == "martingale":
        mart = sol.dM
    elif use == "brownian":
        if prob.dB is None:
            raise ValueError("brownian variant needs the Brownian increments")
        mart = sol.Z[:, :n] * prob.dB
    else:
        raise ValueError(f"unknown variant {use!r}")
    # tail sums over j >= i, i = 0..n
    def tail(a):
        return np.concatenate([np.cumsum(a[:, ::-1], axis=1)[:, ::-1],
                               np.zeros((a.shape[0], 1))], axis=1)

    bracket = prob.R[:, None] + tail(prob.F[:, :n] * dt) - tail(mart) - prob.S
    neg = np.maximum(-bracket, 0.0)
    rhs = np.maximum.accumulate(neg[:, ::-1], axis=1)[:, ::-1]
    lhs = tail(sol.dK[:, :n]) + sol.dK[:, n:n + 1]
    err = np.max(np.abs(lhs - rhs), axis=1)
    return {"k_formula_gap": float(err.mean()),
            "k_formula_se": float(err.std(ddof=1) / np.sqrt(err.size)) if err.size > 1 else 0.0,
            "k_formula_max": float(err.max())}


def dp_oracle(prob: StoppingProblem, n_states: int = 2000) -> float:
    """Y(0) by backward induction on a recombining binomial lattice with ``n_states`` steps."""
    spec = prob.markov
    if spec is None:
        raise NotMarkovReducible("problem carries no one-dimensional Markov description")
    T = prob.grid.T
    m = int(n_states)
    h = T / m
    up = spec.sigma * np.sqrt(h)
    j = np.arange(m + 1)
    x = spec.x0 + spec.mu * T + up * (2 * j - m)
    y = np.asarray(spec.R(x), dtype=float)
    for step in range(m - 1, -1, -1):
        t = step * h
        jj = np.arange(step + 1)
        x = spec.x0 + spec.mu * t + up * (2 * jj - step)
        cont = 0.5 * (y[:-1] + y[1:])
        cont = cont + np.asarray(spec.F(t, x, cont), dtype=float) * h
        y = np.maximum(cont, np.asarray(spec.S(t, x), dtype=float))
    return float(y[0])


def stopping_report(prob: StoppingProblem, sol: RbsdeSolution, barrier: BarrierSpec,
                    n_candidate: int = 20, n_states: int = 2000, seed: int = 0) -> dict:
    tau_hit = hitting_time(sol, barrier, 0).index
    tau_k = k_increase_time(sol, 0).index
    snell = snell_check(prob, sol, 0, n_candidate, seed, barrier)
    kf = k_runningmax_check(prob, sol)
    try:
        oracle = dp_oracle(prob, n_states)
    except NotMarkovReducible:
        oracle = None
    return {
        "y0": float(np.mean(sol.Y[:, 0])),
        "y0_oracle": oracle,
        "tau_agreement_rate": float(np.mean(tau_hit == tau_k)),
        "snell_gap": snell["value_gap"],
        "candidate_excess": snell["candidate_excess"],
        "candidate_se": snell["candidate_se"],
        "k_formula_gap": kf["k_formula_gap"],
    }
