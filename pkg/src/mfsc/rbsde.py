"""Reflected advanced mean-field BSDEs on a particle ensemble.

Solves

    Y(t) = R + int_t^T F(s, X(s), Y(s), Z(s), E[Y^s | F_s], E[Z^s | F_s], L(Y^s, Z^s)) ds
           + K(T) - K(t) - int_t^T Z dB,        Y >= S,   int (Y - S) dK = 0,

with Y = R and Z = 0 after T.  The outer loop is a Picard iteration in which the
advanced segments and their law are read from the previous iterate; the inner
backward sweep is an explicit least-squares Monte Carlo step followed by
reflection ``Y_k = max(Y~_k, S_k)``.

Driver signature (vectorised over particles)::

    F(t, x, y, z, ybar, zbar, law) -> (N,)

with ``ybar``/``zbar`` of shape (N, d+1) holding the conditional expectations of
the advanced windows at offsets 0, dt, ..., delta and ``law`` the moment vector
(E Y, E Y^2, E Z, E Z^2) over the window.

Discrete conventions: the push dK_k is applied at grid time t_k, and
K_k = sum_{j <= k} dK_j, so K(0-) = 0 and Y_k = R + sum_{j >= k} (F_j dt + dK_j)
minus the martingale increments.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .grid import TimeGrid
from .regression import Projector, projectors_for
from .tables import write_csv

__all__ = [
    "BarrierViolation",
    "NoConvergence",
    "DriverSpec",
    "BarrierSpec",
    "RbsdeSolution",
    "HBetaNorm",
    "backward_sweep",
    "solve_picard",
    "h_beta_norm",
    "skorokhod_residual",
    "solution_invariants",
    "check_driver",
    "write_solution_csv",
    "write_picard_csv",
]


class BarrierViolation(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


@dataclass
class DriverSpec:
    F: Callable
    C: float = 1.0
    c: float = 1.0
    uses_advanced: bool = True
    name: str = ""


@dataclass
class BarrierSpec:
    """Obstacle S on the grid and terminal value R, per particle."""

    S: np.ndarray
    R: np.ndarray
    unsafe: bool = False

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        self.R = np.atleast_1d(np.asarray(self.R, dtype=float))
        if np.any(self.R < self.S[:, -1] - 1e-12):
            raise BarrierViolation("terminal value R must dominate S(T)")
        if np.any(np.diff(self.S, axis=1) < -1e-12):
            if not self.unsafe:
                raise ValueError("barrier must be nondecreasing in t (pass unsafe=True to override)")
            warnings.warn("non-monotone barrier: outside the standing assumptions", stacklevel=2)

    def broadcast(self, n_particles: int) -> tuple[np.ndarray, np.ndarray]:
        S = np.broadcast_to(self.S, (n_particles, self.S.shape[1]))
        R = np.broadcast_to(self.R, (n_particles,))
        return S, R


@dataclass
class HBetaNorm:
    beta: float
    value: float


@dataclass
class RbsdeSolution:
    Y: np.ndarray                  # (N, n+1)
    Z: np.ndarray                  # (N, n+1), Z_n = 0
    K: np.ndarray                  # (N, n+1), K_k = sum_{j<=k} dK_j
    dK: np.ndarray                 # (N, n+1)
    F: np.ndarray                  # (N, n+1) driver values used, F_n = 0
    dM: np.ndarray                 # (N, n) martingale increments Y_{k+1} - E[Y_{k+1} | F_k]
    grid: TimeGrid
    picard_norms: list = field(default_factory=list)
    beta: float | None = None

    @classmethod
    def zeros(cls, n_particles: int, grid: TimeGrid) -> "RbsdeSolution":
        shape = (n_particles, grid.n_steps + 1)
        z = np.zeros(shape)
        return cls(Y=z, Z=z, K=z, dK=z, F=z, dM=np.zeros((n_particles, grid.n_steps)), grid=grid)

    def extended(self) -> tuple[np.ndarray, np.ndarray]:
        """(Y, Z) on [0, T + delta]: Y frozen at Y(T), Z zero after T."""
        d = self.grid.delay_steps
        Y = np.concatenate([self.Y, np.repeat(self.Y[:, -1:], d, axis=1)], axis=1)
        Z = np.concatenate([self.Z, np.zeros((self.Z.shape[0], d))], axis=1)
        return Y, Z


def _extend(arr: np.ndarray, grid: TimeGrid, frozen: bool) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    d = grid.delay_steps
    if arr.shape[-1] == grid.n_steps + d + 1:
        return arr
    tail = np.repeat(arr[..., -1:], d, axis=-1) if frozen else np.zeros(arr.shape[:-1] + (d,))
    return np.concatenate([arr, tail], axis=-1)


def h_beta_norm(Y, Z, beta: float, grid: TimeGrid) -> float:
    """Monte Carlo + trapezoid estimate of E int_0^{T+delta} e^{beta t} (Y^2 + Z^2) dt."""
    Y = _extend(np.atleast_2d(Y), grid, frozen=True)
    Z = _extend(np.atleast_2d(Z), grid, frozen=False)
    t = grid.advanced_times
    integrand = np.exp(beta * t) * np.mean(Y * Y + Z * Z, axis=0)
    if integrand.size == 1:
        return 0.0
    return float(trapezoid(integrand, dx=grid.dt))


def _law_moments(yw: np.ndarray, zw: np.ndarray) -> np.ndarray:
    return np.array([yw.mean(), (yw * yw).mean(), zw.mean(), (zw * zw).mean()])


def backward_sweep(driver: DriverSpec, barrier: BarrierSpec, prev: RbsdeSolution | None,
                   ensemble, grid: TimeGrid | None = None,
                   projectors: list[Projector] | None = None,
                   method: str = "max", penalty: float = 1e4) -> RbsdeSolution:
    """One application of the Picard map: advanced terms read from ``prev``."""
    grid = grid or ensemble.grid
    X, dB = ensemble.X, ensemble.dB
    N, n, d, dt = X.shape[0], grid.n_steps, grid.delay_steps, grid.dt
    if projectors is None:
        projectors = projectors_for(X)
    S, R = barrier.broadcast(N)
    if np.any(R < S[:, n] - 1e-12):
        raise BarrierViolation("terminal value R must dominate S(T)")
    if prev is None:
        prev_Y = np.zeros((N, n + d + 1))
        prev_Z = np.zeros((N, n + d + 1))
    else:
        prev_Y, prev_Z = prev.extended()
    times = grid.times

    Y = np.empty((N, n + 1))
    Z = np.zeros((N, n + 1))
    dK = np.zeros((N, n + 1))
    Fv = np.zeros((N, n + 1))
    dM = np.empty((N, n))
    Y[:, n] = R
    for k in range(n - 1, -1, -1):
        proj = projectors[k]
        y_next = Y[:, k + 1]
        y_hat = proj.project(y_next)
        z = proj.project((y_next - y_hat) * dB[:, k]) / dt
        yw = prev_Y[:, k: k + d + 1]
        zw = prev_Z[:, k: k + d + 1]
        if driver.uses_advanced:
            ybar = proj.project(yw)
            zbar = proj.project(zw)
        else:
            ybar, zbar = yw, zw
        law = _law_moments(yw, zw)
        f = np.broadcast_to(driver.F(times[k], X[:, k], y_hat, z, ybar, zbar, law), (N,))
        y_tilde = y_hat + f * dt
        if method == "max":
            y_k = np.maximum(y_tilde, S[:, k])
        elif method == "penalty":
            w = penalty * dt / (1.0 + penalty * dt)
            y_k = y_tilde + w * np.maximum(S[:, k] - y_tilde, 0.0)
        else:
            raise ValueError(f"unknown reflection method {method!r}")
        Y[:, k] = y_k
        Z[:, k] = z
        Fv[:, k] = f
        dK[:, k] = y_k - y_tilde
        dM[:, k] = y_next - y_hat
    return RbsdeSolution(Y=Y, Z=Z, K=np.cumsum(dK, axis=1), dK=dK, F=Fv, dM=dM, grid=grid)


def solve_picard(driver: DriverSpec, barrier: BarrierSpec, ensemble, grid: TimeGrid | None = None,
                 rho: float = 2.0, tol: float = 1e-10, max_iter: int = 50,
                 method: str = "max", knots: int = 0) -> RbsdeSolution:
    """Iterate the sweep from (0, 0) until the H_beta successive difference is below ``tol``.

    beta = 1 + 8 rho C^2 is the weight under which the map contracts with factor 1/rho.
    ``knots > 0`` switches the regressions to cubic splines in the state.
    """
    if rho <= 1:
        raise ValueError("rho must exceed 1")
    grid = grid or ensemble.grid
    beta = 1.0 + 8.0 * rho * driver.C ** 2
    projectors = projectors_for(ensemble.X, knots=knots)
    current = None
    norms: list[float] = []
    for _ in range(max_iter):
        new = backward_sweep(driver, barrier, current, ensemble, grid, projectors, method)
        if current is None:
            diff = h_beta_norm(new.Y, new.Z, beta, grid)
        else:
            diff = h_beta_norm(new.Y - current.Y, new.Z - current.Z, beta, grid)
        norms.append(diff)
        current = new
        if diff < tol:
            break
    else:
        ratio = norms[-1] / norms[-2] if len(norms) > 1 and norms[-2] > 0 else np.inf
        if ratio >= 1:
            raise NoConvergence(f"Picard stalled after {max_iter} sweeps (ratio {ratio:.3g})")
    current.picard_norms = norms
    current.beta = beta
    return current


def skorokhod_residual(sol: RbsdeSolution, barrier: BarrierSpec) -> float:
    """Mean over particles of sum_k (Y_k - S_k) dK_k."""
    S, _ = barrier.broadcast(sol.Y.shape[0])
    return float(np.mean(np.sum((sol.Y - S) * sol.dK, axis=1)))


def solution_invariants(sol: RbsdeSolution, barrier: BarrierSpec, tol: float) -> dict:
    """Pass/fail of the structural properties of a reflected solution, with their margins."""
    S, R = barrier.broadcast(sol.Y.shape[0])
    below = float(np.max(S - sol.Y))
    k_drop = float(np.max(-np.diff(sol.K, axis=1))) if sol.K.shape[1] > 1 else 0.0
    residual = abs(skorokhod_residual(sol, barrier))
    terminal = float(np.max(np.abs(sol.Y[:, -1] - R)))
    checks = {
        "y_above_barrier": below <= tol,
        "k_nondecreasing": k_drop <= 1e-12 and float(np.min(sol.K[:, 0])) >= -1e-12,
        "skorokhod_residual": residual <= tol,
        "terminal_value": terminal <= 1e-12 * max(1.0, float(np.max(np.abs(R)))),
    }
    return {"ok": all(checks.values()), "checks": checks, "max_barrier_deficit": below,
            "max_k_decrease": k_drop, "skorokhod_residual": residual, "terminal_gap": terminal}


def check_driver(driver: DriverSpec, grid: TimeGrid, n_samples: int = 1000, seed: int = 0,
                 slack: float = 1e-9) -> dict:
    """Sample the growth bound |F(t, 0...)| <= c and the Lipschitz bound with constant C.

    Perturbation size is measured in the Euclidean norm of all arguments, the
    discrete window entries counted individually.
    """
    rng = np.random.default_rng(seed)
    d1 = grid.delay_steps + 1
    t = rng.uniform(0.0, grid.T, n_samples)
    zero = np.zeros(1)
    growth = max(abs(float(np.asarray(driver.F(tt, zero, zero, zero, np.zeros((1, d1)),
                                               np.zeros((1, d1)), np.zeros(4)))[0]))
                 for tt in t)

    def draw():
        return (rng.normal(size=1), rng.normal(size=1), rng.normal(size=1),
                rng.normal(size=(1, d1)), rng.normal(size=(1, d1)), rng.normal(size=4))

    worst = 0.0
    for tt in t:
        a, b = draw(), draw()
        fa = float(np.asarray(driver.F(tt, *a))[0])
        fb = float(np.asarray(driver.F(tt, a[0], *b[1:]))[0])
        dist = np.sqrt(sum(float(np.sum((u - v) ** 2)) for u, v in zip(a[1:], b[1:])))
        if dist > 0:
            worst = max(worst, abs(fa - fb) / dist)
    return {"growth": growth, "growth_ok": growth <= driver.c + slack,
            "lipschitz": worst, "lipschitz_ok": worst <= driver.C + slack}


def write_solution_csv(sol: RbsdeSolution, path) -> None:
    N = sol.Y.shape[0]
    write_csv(path, ["t", "particle", "Y", "Z", "K"],
              ((t, i, sol.Y[i, k], sol.Z[i, k], sol.K[i, k])
               for k, t in enumerate(sol.grid.times) for i in range(N)))


def write_picard_csv(sol: RbsdeSolution, path) -> None:
    write_csv(path, ["iter", "h_beta_diff"], enumerate(sol.picard_norms, start=1))
