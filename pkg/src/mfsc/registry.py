"""Named coefficient sets, drivers, barriers and control problems used by configs.

Each entry is a factory taking a parameter dict, so configs select behaviour by
name plus parameters and never carry code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .control import ControlProblem, MemoryFunctional
from .forward import CoefficientSpec, constant
from .rbsde import BarrierSpec, DriverSpec
from .stopping import MarkovSpec

__all__ = ["Entry", "COEFFICIENTS", "DRIVERS", "BARRIERS", "PROBLEMS", "catalog", "lookup"]


@dataclass(frozen=True)
class Entry:
    factory: Callable
    summary: str


# ---------------------------------------------------------------- forward coefficients

def _brownian(p):
    return CoefficientSpec(constant(p.get("mu", 0.0)), constant(p.get("sigma", 1.0)),
                           alpha=p.get("x0", 0.0))


def _ou(p):
    theta, sigma = float(p.get("theta", 1.0)), float(p.get("sigma", 1.0))
    return CoefficientSpec(lambda t, x, xb, m, mb, xi: -theta * x, constant(sigma),
                           alpha=p.get("x0", 0.0), lipschitz=theta)


def _mean_reverting_field(p):
    """Pull towards the ensemble mean."""
    theta, sigma = float(p.get("theta", 1.0)), float(p.get("sigma", 1.0))
    return CoefficientSpec(lambda t, x, xb, m, mb, xi: -theta * (x - m[0]), constant(sigma),
                           alpha=p.get("x0", 0.0), lipschitz=2 * theta)


def _delay_feedback(p):
    """Drift kappa * (mean of the path over the memory window - x)."""
    kappa, sigma = float(p.get("kappa", 1.0)), float(p.get("sigma", 0.5))

    def b(t, x, xb, m, mb, xi):
        return kappa * (xb.mean(axis=1) - x)

    return CoefficientSpec(b, constant(sigma), alpha=p.get("x0", 1.0), lipschitz=2 * kappa)


def _deterministic(p):
    return CoefficientSpec(constant(0.0), constant(0.0), alpha=p.get("x0", 0.0))


COEFFICIENTS = {
    "brownian": Entry(_brownian, "dX = mu dt + sigma dB"),
    "ornstein_uhlenbeck": Entry(_ou, "dX = -theta X dt + sigma dB"),
    "mean_field_ou": Entry(_mean_reverting_field, "dX = -theta (X - E X) dt + sigma dB"),
    "delay_feedback": Entry(_delay_feedback, "dX = kappa (window average - X) dt + sigma dB"),
    "deterministic": Entry(_deterministic, "X constant (no noise)"),
}


# ---------------------------------------------------------------- drivers

def _advanced_deterministic(p):
    """F = Y(t + delta), the far end of the advanced window."""
    return DriverSpec(lambda t, x, y, z, yb, zb, law: yb[:, -1], C=1.0, c=0.0,
                      name="advanced_deterministic")


def _linear_decay(p):
    r = float(p.get("rate", 1.0))
    return DriverSpec(lambda t, x, y, z, yb, zb, law: -r * y, C=r, c=0.0, uses_advanced=False,
                      name="linear_decay")


def _advanced_mean(p):
    """F = a * E[Y(t + delta) | F_t] + m * (mean of Y over the window, across particles)."""
    a, m = float(p.get("a", 0.5)), float(p.get("m", 0.5))
    return DriverSpec(lambda t, x, y, z, yb, zb, law: a * yb[:, -1] + m * law[0],
                      C=abs(a) + abs(m), c=0.0, name="advanced_mean")


DRIVERS = {
    "advanced_deterministic": Entry(_advanced_deterministic, "F = E[Y(t + delta) | F_t]"),
    "reflected_exponential": Entry(_linear_decay, "F = -rate * y (use with a barrier)"),
    "linear_decay": Entry(_linear_decay, "F = -rate * y"),
    "advanced_mean": Entry(_advanced_mean, "F = a E[Y(t+delta)|F_t] + m E[Y over window]"),
}


# ---------------------------------------------------------------- barriers

_FLOOR = -1e300   # finite stand-in for "no obstacle" so (Y - S) dK stays finite


def _no_barrier(p, grid, X, unsafe=False):
    terminal = float(p.get("terminal", 1.0))
    return BarrierSpec(np.full(grid.n_steps + 1, _FLOOR), terminal, unsafe)


def _constant_barrier(p, grid, X, unsafe=False):
    return BarrierSpec(np.full(grid.n_steps + 1, float(p.get("level", 0.5))),
                       float(p.get("terminal", 1.0)), unsafe)


def _linear_barrier(p, grid, X, unsafe=False):
    """S(t) = s0 + s1 t; R = r0 + r1 clip(X(T), 0, 1).  s1 < 0 needs ``unsafe``."""
    s0, s1 = float(p.get("s0", 0.2)), float(p.get("s1", 0.3))
    r0, r1 = float(p.get("r0", 0.5)), float(p.get("r1", 0.5))
    return BarrierSpec(s0 + s1 * grid.times, r0 + r1 * np.clip(X[:, -1], 0.0, 1.0), unsafe)


def _put_payoff(p, grid, X, unsafe=False):
    """S = R = (strike - X)^+ discounted at ``rate``: decreasing in t, so needs ``unsafe``."""
    k, r = float(p.get("strike", 1.0)), float(p.get("rate", 0.05))
    pay = np.exp(-r * grid.times) * np.maximum(k - X, 0.0)
    return BarrierSpec(pay, pay[:, -1], unsafe)


BARRIERS = {
    "none": Entry(_no_barrier, "no obstacle, R = terminal"),
    "constant": Entry(_constant_barrier, "S = level, R = terminal"),
    "linear_clip": Entry(_linear_barrier, "S = s0 + s1 t, R = r0 + r1 clip(X_T, 0, 1)"),
    "discounted_put": Entry(_put_payoff, "S = R = exp(-r t) (K - X)^+ (non-monotone)"),
}


def markov_description(p: dict, coeff: dict, driver_params: dict) -> MarkovSpec:
    """Lattice description of brownian state + linear_decay driver + linear_clip barrier."""
    s0, s1 = float(p.get("s0", 0.2)), float(p.get("s1", 0.3))
    r0, r1 = float(p.get("r0", 0.5)), float(p.get("r1", 0.5))
    rate = float(driver_params.get("rate", 1.0))
    return MarkovSpec(x0=float(coeff.get("x0", 0.0)), sigma=float(coeff.get("sigma", 1.0)),
                      mu=float(coeff.get("mu", 0.0)),
                      F=lambda t, x, y: -rate * y,
                      S=lambda t, x: s0 + s1 * t + 0.0 * x,
                      R=lambda x: r0 + r1 * np.clip(x, 0.0, 1.0))


# ---------------------------------------------------------------- control problems

def _zero(t, x, z, m, xi):
    return np.zeros(np.shape(x))


def _one(t, x, z, m, xi):
    return np.ones(np.shape(x))


def _monotone_follower(p):
    """Harvest X = x0 + B at unit rate lambda = -1; reward -X(T)^2, cost c per unit."""
    c = float(p.get("c", 1.0))
    sigma = float(p.get("sigma", 1.0))
    return ControlProblem(b=_zero, sigma=lambda t, x, z, m, xi: np.full(np.shape(x), sigma),
                          g=lambda x, m: -x * x, h=lambda t, x: np.full(np.shape(x), -c),
                          lam=-float(p.get("lambda0", 1.0)), alpha=float(p.get("x0", 1.0)),
                          n_moments=1, name="monotone_follower")


def _costly_harvest(p):
    """Linear reward x(T) with harvesting cost c > sup |lambda p0|: never harvest."""
    c = float(p.get("c", 5.0))
    return ControlProblem(b=_zero, sigma=_one, g=lambda x, m: x,
                          h=lambda t, x: np.full(np.shape(x), -c), lam=-1.0,
                          alpha=float(p.get("x0", 1.0)), n_moments=1, name="costly_harvest")


def _memory_harvest(p):
    """Delay-averaged growth kappa * avg(X over window), running cost -x^2, mean-field bequest."""
    kappa, c = float(p.get("kappa", 0.5)), float(p.get("c", 1.0))
    mean_weight = float(p.get("mean_weight", 0.0))

    def b(t, x, z, m, xi):
        return kappa * z[:, 0]

    return ControlProblem(b=b, sigma=lambda t, x, z, m, xi: np.full(np.shape(x), 0.5),
                          f=lambda t, x, z, m, xi: -x * x,
                          g=lambda x, m: -x * x - mean_weight * m[0] ** 2,
                          h=lambda t, x: np.full(np.shape(x), -c), lam=-1.0,
                          alpha=float(p.get("x0", 1.0)),
                          memory=(MemoryFunctional.averaging(),), n_moments=1,
                          name="memory_harvest")


PROBLEMS = {
    "monotone_follower": Entry(_monotone_follower,
                               "b=0, sigma=1, lambda=-1, f=0, g=-x^2, h=-c"),
    "costly_harvest": Entry(_costly_harvest, "g = x, h = -c with c large: xi = 0 is optimal"),
    "memory_harvest": Entry(_memory_harvest,
                            "b = kappa * window average, f = -x^2, g = -x^2 - w m1^2, h = -c"),
}


def catalog(filter_text: str = "") -> dict[str, list[tuple[str, str]]]:
    """Registered names by section, keeping those containing ``filter_text``."""
    from .configs import shipped_configs

    sections = {"coefficients": COEFFICIENTS, "drivers": DRIVERS, "barriers": BARRIERS,
                "problems": PROBLEMS}
    out = {sec: [(k, e.summary) for k, e in reg.items() if filter_text in k]
           for sec, reg in sections.items()}
    out["configs"] = [(k, v) for k, v in shipped_configs().items() if filter_text in k]
    return out


def lookup(section: dict, name: str, what: str) -> Entry:
    if name not in section:
        raise KeyError(f"unknown {what} {name!r}; known: {', '.join(sorted(section))}")
    return section[name]
