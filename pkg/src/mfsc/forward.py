"""Euler-Maruyama particle simulation of controlled memory mean-field SDEs.

    dX(t) = b(t, X(t), X_t, M(t), M_t, xi(t)) dt + sigma(...) dB(t) + lambda(t) dxi(t),
    X(t) = alpha(t) on [-delta, 0],

with the law M(t) replaced by the empirical law of N interacting particles.
Coefficients are vectorised over particles and called as

    b(t, x, xbar, m, mbar, xi)

where ``x`` has shape (N,), ``xbar`` (N, d+1) is the memory segment at offsets
0, dt, ..., delta, ``m`` (k,) holds the first k raw moments of the empirical law,
``mbar`` (d+1, k) the same moments along the memory window and ``xi`` (N,) the
current control value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import SingularControl, TimeGrid, brownian_matrix, memory_segment
from .measures import AtomicMeasure, MeasureSegment, empirical_moments
from .tables import write_csv

__all__ = [
    "NonFinite",
    "CoefficientSpec",
    "ParticleEnsemble",
    "simulate",
    "empirical_law",
    "memory_view",
    "law_segment",
    "constant",
]


class NonFinite(FloatingPointError):
    """A particle state became inf/nan (coefficient blow-up)."""


def constant(value: float) -> Callable:
    """Coefficient returning ``value`` for every particle."""
    def coef(t, x, xbar, m, mbar, xi):
        return np.full(x.shape, float(value))
    return coef


@dataclass
class CoefficientSpec:
    b: Callable
    sigma: Callable
    lam: Callable | float = 0.0
    alpha: Callable | np.ndarray | float = 0.0
    lipschitz: float = 1.0
    n_moments: int = 2

    def lam_at(self, t: float) -> float:
        return float(self.lam(t)) if callable(self.lam) else float(self.lam)

    def initial_path(self, grid: TimeGrid) -> np.ndarray:
        """alpha on the grid times of [-delta, 0]."""
        times = grid.extended_times[: grid.delay_steps + 1]
        if callable(self.alpha):
            vals = np.array([float(self.alpha(t)) for t in times])
        else:
            vals = np.broadcast_to(np.asarray(self.alpha, dtype=float), times.shape).copy()
        if vals.shape != times.shape:
            raise ValueError(f"alpha needs {times.size} values on [-delta, 0]")
        return vals


@dataclass
class ParticleEnsemble:
    """Particle paths on [-delta, T] plus the noise and control that produced them."""

    paths: np.ndarray          # (N, n_steps + 1 + delay_steps)
    grid: TimeGrid
    dB: np.ndarray             # (N, n_steps)
    xi: np.ndarray             # (N, n_steps + 1) realised control on [0, T]
    x_pre: np.ndarray          # (N, n_steps + 1) state just before the control jump
    seed: int | None = None
    _moments: dict = field(default_factory=dict, repr=False)

    @property
    def n_particles(self) -> int:
        return self.paths.shape[0]

    @property
    def X(self) -> np.ndarray:
        """Paths restricted to [0, T], shape (N, n_steps + 1)."""
        return self.paths[:, self.grid.delay_steps:]

    def moments(self, k: int = 2) -> np.ndarray:
        """Raw moments of the empirical law at each time of [0, T], shape (n+1, k)."""
        if k not in self._moments:
            self._moments[k] = empirical_moments(self.X, k)
        return self._moments[k]

    def write_paths_csv(self, path) -> None:
        X = self.X
        write_csv(path, ["t", "particle", "x"],
                  ((t, i, X[i, k]) for k, t in enumerate(self.grid.times)
                   for i in range(self.n_particles)))

    def write_moments_csv(self, path) -> None:
        m = self.moments(2)
        write_csv(path, ["t", "mean", "var"],
                  ((t, m1, m2 - m1 * m1) for t, (m1, m2) in zip(self.grid.times, m)))


def _control_source(xi, grid: TimeGrid, n: int):
    """Return (values_or_None, policy_or_None) for the supported control kinds."""
    if xi is None:
        return np.zeros((n, grid.n_steps + 1)), None
    if isinstance(xi, SingularControl):
        return np.broadcast_to(xi.on_grid(grid), (n, grid.n_steps + 1)), None
    if hasattr(xi, "increment"):
        return None, xi
    vals = np.asarray(xi, dtype=float)
    vals = np.broadcast_to(vals, (n, grid.n_steps + 1))
    if np.any(vals[:, 0] < 0) or np.any(np.diff(vals, axis=1) < -1e-12):
        raise ValueError("control path must be nondecreasing with xi(0-) = 0")
    return vals, None


def simulate(spec: CoefficientSpec, xi, grid: TimeGrid, n_particles: int, seed: int = 0,
             threads: int = 1, increments: np.ndarray | None = None) -> ParticleEnsemble:
    """Interacting-particle Euler scheme; order within a step is drift, noise, jump.

    ``xi`` may be a :class:`SingularControl` (same for all particles), an array of
    per-particle control paths on the grid, or a feedback policy exposing
    ``increment(k, t, x_pre) -> dxi`` evaluated on the pre-jump state at t_k.
    ``increments`` overrides the Brownian increments (common random numbers).
    """
    n, d, dt = grid.n_steps, grid.delay_steps, grid.dt
    N = int(n_particles)
    dB = brownian_matrix(seed, N, grid, threads) if increments is None else np.asarray(increments)
    if dB.shape != (N, n):
        raise ValueError(f"increments must have shape {(N, n)}")
    k_mom = spec.n_moments
    times = grid.times

    paths = np.empty((N, n + d + 1))
    paths[:, : d + 1] = spec.initial_path(grid)
    mom = np.empty((n + d + 1, k_mom))
    mom[: d + 1] = empirical_moments(paths[:, : d + 1], k_mom)
    x_pre = np.empty((N, n + 1))
    values, policy = _control_source(xi, grid, N)
    xi_path = np.zeros((N, n + 1))

    # jump at t = 0 acts on alpha(0) since xi(0-) = 0
    x_pre[:, 0] = paths[:, d]
    jump0 = policy.increment(0, 0.0, x_pre[:, 0]) if policy else values[:, 0]
    xi_path[:, 0] = jump0
    paths[:, d] = x_pre[:, 0] + spec.lam_at(0.0) * jump0
    mom[d] = empirical_moments(paths[:, d], k_mom)

    for k in range(n):
        col = k + d
        t = times[k]
        x = paths[:, col]
        xbar = paths[:, col - d: col + 1][:, ::-1]
        m = mom[col]
        mbar = mom[col - d: col + 1][::-1]
        drift = spec.b(t, x, xbar, m, mbar, xi_path[:, k])
        vol = spec.sigma(t, x, xbar, m, mbar, xi_path[:, k])
        pre = x + drift * dt + vol * dB[:, k]
        if policy is not None:
            dxi = np.asarray(policy.increment(k + 1, times[k + 1], pre), dtype=float)
        else:
            dxi = values[:, k + 1] - values[:, k]
        xi_path[:, k + 1] = xi_path[:, k] + dxi
        x_pre[:, k + 1] = pre
        paths[:, col + 1] = pre + spec.lam_at(times[k + 1]) * dxi
        if not np.all(np.isfinite(paths[:, col + 1])):
            raise NonFinite(f"non-finite state at step {k + 1}")
        mom[col + 1] = empirical_moments(paths[:, col + 1], k_mom)

    ens = ParticleEnsemble(paths=paths, grid=grid, dB=dB, xi=xi_path, x_pre=x_pre, seed=seed)
    ens._moments[k_mom] = mom[d:].copy()
    return ens


def empirical_law(ensemble: ParticleEnsemble, t_index: int) -> AtomicMeasure:
    return AtomicMeasure.empirical(ensemble.X[:, t_index])


def memory_view(ensemble: ParticleEnsemble, particle: int, t_index: int):
    return memory_segment(ensemble.paths[particle], ensemble.grid, t_index)


def law_segment(ensemble: ParticleEnsemble, t_index: int) -> MeasureSegment:
    """Empirical laws at offsets 0..delta behind ``t_index`` (reads alpha before 0)."""
    d = ensemble.grid.delay_steps
    col = t_index + d
    cols = range(col, col - d - 1, -1)
    return MeasureSegment(tuple(AtomicMeasure.empirical(ensemble.paths[:, c]) for c in cols),
                          ensemble.grid.dt)
