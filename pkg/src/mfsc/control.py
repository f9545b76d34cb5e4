"""Singular control of memory mean-field SDEs: adjoints, optimality checks, stopping link.

The controlled problem maximises

    J(xi) = E[ int_0^T f(t, X, Z, m, xi) dt + g(X(T), m(T)) + int_0^T h(t, X(t-)) dxi(t) ]

over nondecreasing xi, where Z collects memory functionals of the path segment
(weighted averages or point evaluations of the past) and m the first k raw
moments of the law.  Coefficients are vectorised over particles::

    b(t, x, z, m, xi), sigma(t, x, z, m, xi), f(t, x, z, m, xi)  -> (N,)
    g(x, m) -> (N,),   h(t, x) -> (N,)

with ``z`` of shape (N, J) and ``m`` of shape (k,).  Partial derivatives are taken
by central differences, so only the functions themselves are needed.

The adjoint p0 is the exact discrete adjoint of the Euler scheme with conditional
expectations replaced by regression.  Discrete conventions: the control jump
J_k = xi_k - xi_{k-1} acts at grid time t_k on the pre-jump state x_pre_k, and the
singular density at t_k is lambda(t_k) p0_k + h(t_k, x_pre_k).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .forward import CoefficientSpec, ParticleEnsemble, simulate
from .grid import TimeGrid
from .rbsde import BarrierSpec, DriverSpec, RbsdeSolution, solution_invariants, solve_picard
from .regression import Projector
from .stopping import StoppingProblem, hitting_time, stopped_values

__all__ = [
    "OffsetOutOfRange",
    "InadmissiblePerturbation",
    "NotConcave",
    "LambdaNotConstantNegative",
    "MemoryFunctional",
    "dual_operator",
    "riesz_sides",
    "ControlProblem",
    "HamiltonianValue",
    "hamiltonian",
    "AdjointPair",
    "solve_adjoints",
    "payoff",
    "Perturbation",
    "canonical_perturbations",
    "directional_derivative",
    "finite_difference",
    "derivative_table",
    "derivatives_ok",
    "check_necessary",
    "check_sufficient",
    "ReflectionPolicy",
    "ThresholdSearch",
    "optimize_threshold",
    "StoppingConnection",
    "assemble_stopping_connection",
    "verify_connection",
    "control_report",
]


class OffsetOutOfRange(ValueError):
    pass


class InadmissiblePerturbation(ValueError):
    pass


class NotConcave(ValueError):
    pass


class LambdaNotConstantNegative(ValueError):
    pass


# ---------------------------------------------------------------- memory duals

@dataclass(frozen=True)
class MemoryFunctional:
    """Linear functional of the segment {x(t - r)}_{0 <= r <= delta}.

    ``averaging``: int_0^delta a(r) x(t - r) dr (trapezoid on the grid);
    ``evaluation``: x(t - t0), linearly interpolated between grid offsets.
    """

    kind: str
    a: Callable | None = None
    t0: float = 0.0

    @classmethod
    def averaging(cls, a: Callable | None = None) -> "MemoryFunctional":
        return cls("averaging", a=a)

    @classmethod
    def evaluation(cls, t0: float) -> "MemoryFunctional":
        return cls("evaluation", t0=float(t0))

    def weights(self, grid: TimeGrid) -> np.ndarray:
        """Weights w_r on offsets r = 0, dt, ..., delta so that G(x_t) = sum_r w_r x(t - r)."""
        d, dt = grid.delay_steps, grid.dt
        if self.kind == "averaging":
            r = np.arange(d + 1) * dt
            a = np.ones(d + 1) if self.a is None else np.array([float(self.a(s)) for s in r])
            w = a * dt
            if d == 0:
                return np.zeros(1)
            w[0] *= 0.5
            w[-1] *= 0.5
            return w
        if self.kind == "evaluation":
            if not -1e-12 <= self.t0 <= grid.delta + 1e-12:
                raise OffsetOutOfRange(f"offset {self.t0} outside [0, {grid.delta}]")
            pos = min(max(self.t0 / dt, 0.0), float(d))
            lo = int(np.floor(pos + 1e-9))
            frac = pos - lo if lo < d else 0.0
            w = np.zeros(d + 1)
            w[lo] = 1.0 - frac
            if frac > 1e-9:
                w[lo + 1] = frac
            return w
        raise ValueError(f"unknown memory functional {self.kind!r}")

    def apply(self, xbar: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Functional value for segments ``xbar`` (..., d+1) ordered by offset."""
        return np.asarray(xbar, dtype=float) @ self.weights(grid)


def dual_operator(functional: MemoryFunctional, p: np.ndarray, t_index: int,
                  grid: TimeGrid) -> np.ndarray | float:
    """G*(t) = sum_r w_r p(t + r): the adjoint of the memory functional applied to ``p``.

    ``p`` is a grid process on [0, T + delta] (last axis); it must reach t + delta.
    """
    p = np.asarray(p, dtype=float)
    w = functional.weights(grid)
    d = grid.delay_steps
    if p.shape[-1] < t_index + d + 1:
        raise ValueError("process must be defined through t + delta")
    out = p[..., t_index: t_index + d + 1] @ w
    return float(out) if np.ndim(out) == 0 else out


def riesz_sides(functional: MemoryFunctional, p: np.ndarray, y: np.ndarray,
                grid: TimeGrid) -> tuple[float, float]:
    """Both sides of int_0^T p(t) G(y_t) dt = int_0^T G*p(t) y(t) dt by trapezoid.

    ``p`` and ``y`` are (N, n+1) processes on [0, T]; p is extended by zero after T
    and y by zero before 0.  Returns the two sample means.
    """
    p, y = np.atleast_2d(p), np.atleast_2d(y)
    n, d = grid.n_steps, grid.delay_steps
    y_ext = np.concatenate([np.zeros((y.shape[0], d)), y], axis=1)
    p_ext = np.concatenate([p, np.zeros((p.shape[0], d))], axis=1)
    w = functional.weights(grid)
    gy = sum(w[r] * y_ext[:, d - r: d - r + n + 1] for r in range(d + 1))
    gp = sum(w[r] * p_ext[:, r: r + n + 1] for r in range(d + 1))
    lhs = trapezoid(p * gy, dx=grid.dt, axis=1).mean()
    rhs = trapezoid(gp * y, dx=grid.dt, axis=1).mean()
    return float(lhs), float(rhs)


# ---------------------------------------------------------------- problem

def _zero(t, x, *args):
    return np.zeros(np.shape(x))


@dataclass
class ControlProblem:
    b: Callable
    sigma: Callable
    f: Callable = _zero
    g: Callable = lambda x, m: np.zeros(np.shape(x))
    h: Callable = _zero
    lam: float | Callable = -1.0
    alpha: float | Callable | np.ndarray = 0.0
    memory: tuple = ()
    n_moments: int = 2
    depends_on_xi: bool = False
    name: str = ""

    def lam_at(self, t: float) -> float:
        return float(self.lam(t)) if callable(self.lam) else float(self.lam)

    def memory_weights(self, grid: TimeGrid) -> np.ndarray:
        """(J, d+1) weights of the memory functionals."""
        if not self.memory:
            return np.zeros((0, grid.delay_steps + 1))
        return np.stack([fn.weights(grid) for fn in self.memory])

    def coefficients(self, grid: TimeGrid) -> CoefficientSpec:
        """Forward coefficients in the (t, x, xbar, m, mbar, xi) convention of the simulator."""
        W = self.memory_weights(grid)

        def lift(fn):
            def coef(t, x, xbar, m, mbar, xi):
                return np.broadcast_to(np.asarray(fn(t, x, xbar @ W.T, m, xi), dtype=float),
                                       x.shape)
            return coef

        return CoefficientSpec(b=lift(self.b), sigma=lift(self.sigma), lam=self.lam,
                               alpha=self.alpha, n_moments=self.n_moments)

    def memory_features(self, ensemble: ParticleEnsemble) -> np.ndarray:
        """(N, n+1, J) memory functional values along the paths on [0, T]."""
        grid = ensemble.grid
        n, d = grid.n_steps, grid.delay_steps
        W = self.memory_weights(grid)
        z = np.zeros((ensemble.n_particles, n + 1, W.shape[0]))
        for r in range(d + 1):
            z += ensemble.paths[:, d - r: d - r + n + 1, None] * W[:, r]
        return z

    def simulate(self, xi, grid: TimeGrid, n_particles: int, seed: int = 0, threads: int = 1,
                 increments: np.ndarray | None = None) -> ParticleEnsemble:
        return simulate(self.coefficients(grid), xi, grid, n_particles, seed, threads, increments)


def _step(v) -> np.ndarray:
    return 1e-6 * (1.0 + np.abs(v))


def _partials(fn, t, x, z, m, xi) -> tuple:
    """Central-difference partials of fn(t, x, z, m, xi) in x, z_j, m_j and xi."""
    def ev(x_, z_, m_, xi_):
        return np.broadcast_to(np.asarray(fn(t, x_, z_, m_, xi_), dtype=float), x.shape)

    hx = _step(x)
    dx = (ev(x + hx, z, m, xi) - ev(x - hx, z, m, xi)) / (2 * hx)
    dz = np.zeros(z.shape)
    for j in range(z.shape[1]):
        hj = _step(z[:, j])
        up, dn = z.copy(), z.copy()
        up[:, j] += hj
        dn[:, j] -= hj
        dz[:, j] = (ev(x, up, m, xi) - ev(x, dn, m, xi)) / (2 * hj)
    dm = np.zeros((x.shape[0], m.shape[0]))
    for j in range(m.shape[0]):
        hj = float(_step(m[j]))
        e = np.zeros(m.shape[0])
        e[j] = hj
        dm[:, j] = (ev(x, z, m + e, xi) - ev(x, z, m - e, xi)) / (2 * hj)
    hxi = _step(xi)
    dxi = (ev(x, z, m, xi + hxi) - ev(x, z, m, xi - hxi)) / (2 * hxi)
    return dx, dz, dm, dxi


def _terminal_partials(g, x, m) -> tuple:
    hx = _step(x)
    gx = (np.asarray(g(x + hx, m)) - np.asarray(g(x - hx, m))) / (2 * hx)
    gm = np.zeros((x.shape[0], m.shape[0]))
    for j in range(m.shape[0]):
        hj = float(_step(m[j]))
        e = np.zeros(m.shape[0])
        e[j] = hj
        gm[:, j] = (np.asarray(g(x, m + e)) - np.asarray(g(x, m - e))) / (2 * hj)
    return np.broadcast_to(gx, x.shape), gm


def _h_partial(h, t, x) -> np.ndarray:
    hx = _step(x)
    return np.broadcast_to((np.asarray(h(t, x + hx)) - np.asarray(h(t, x - hx))) / (2 * hx),
                           x.shape)


def _jumps(xi_path: np.ndarray) -> np.ndarray:
    return np.diff(xi_path, axis=1, prepend=0.0)


# ---------------------------------------------------------------- Hamiltonian

@dataclass
class HamiltonianValue:
    h0: np.ndarray
    singular_density: np.ndarray
    parts: dict = field(default_factory=dict)

    def recomposed(self) -> np.ndarray:
        return self.parts["f"] + self.parts["b_p0"] + self.parts["sigma_q0"] + self.parts["p1_dm"]


def hamiltonian(prob: ControlProblem, t: float, x, z, m, xi, p0, q0, p1, dm) -> HamiltonianValue:
    """Rate part f + b p0 + sigma q0 + <p1, dm/dt> and singular part lambda p0 + h.

    ``dm`` is the time derivative of the moment vector along the law path.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.asarray(z, dtype=float).reshape(x.shape[0], -1)
    m = np.atleast_1d(np.asarray(m, dtype=float))
    xi = np.broadcast_to(np.asarray(xi, dtype=float), x.shape)
    p1 = np.broadcast_to(np.asarray(p1, dtype=float), (x.shape[0], m.shape[0]))
    parts = {
        "f": np.broadcast_to(np.asarray(prob.f(t, x, z, m, xi), dtype=float), x.shape),
        "b_p0": np.asarray(prob.b(t, x, z, m, xi), dtype=float) * p0,
        "sigma_q0": np.asarray(prob.sigma(t, x, z, m, xi), dtype=float) * q0,
        "p1_dm": p1 @ np.atleast_1d(np.asarray(dm, dtype=float)),
    }
    h0 = parts["f"] + parts["b_p0"] + parts["sigma_q0"] + parts["p1_dm"]
    sing = prob.lam_at(t) * np.asarray(p0, dtype=float) + np.asarray(prob.h(t, x), dtype=float)
    return HamiltonianValue(h0=np.broadcast_to(h0, x.shape), singular_density=sing, parts=parts)


# ---------------------------------------------------------------- adjoints

@dataclass
class AdjointPair:
    p0: np.ndarray          # (N, n+1) adjoint of X_k (after the jump at t_k)
    q0: np.ndarray          # (N, n+1), zero at T
    p1: np.ndarray          # (N, n+1, k) moment-coordinate adjoint
    q1: np.ndarray          # (N, n+1, k)
    p0_left: np.ndarray     # (N, n+1) value before the jump: p0 + dh/dx * J
    p0_path: np.ndarray     # (N, n+1) pathwise adjoint, E[p0_path | F_t] = p0
    p0_se: np.ndarray       # (N, n+1) regression standard error of p0
    driver: np.ndarray      # (N, n+1) dH0/dx plus the conditioned memory dual
    dM: np.ndarray          # (N, n) martingale increments of the scheme
    h0_xi: np.ndarray       # (N, n+1) dH0/dxi, pathwise
    grid: TimeGrid


def _regression_features(X: np.ndarray, z: np.ndarray, k: int) -> np.ndarray:
    return np.column_stack([X[:, k], z[:, k, :]]) if z.shape[2] else X[:, k]


def _moment_gradient(x: np.ndarray, k: int) -> np.ndarray:
    """d/dx of the moment integrands x, x^2, ..., x^k, shape (N, k)."""
    return np.column_stack([(j + 1) * x ** j for j in range(k)])


def solve_adjoints(prob: ControlProblem, ensemble: ParticleEnsemble, degree: int = 3,
                   knots: int = 16, mean_field_feedback: bool = False) -> AdjointPair:
    """Backward regression sweep for (p0, q0) and (p1, q1) along a simulated ensemble.

    Alongside the regression solution the same recursion is run pathwise (realised
    next values in place of conditional expectations).  Its conditional mean is p0,
    so it gives unbiased estimates of E[p0 * (adapted weight)] free of basis misfit.

    With ``mean_field_feedback`` the x-adjoint also carries the effect of a
    particle's state on the empirical moments, E[d(.)/dm] * d(moments)/dx, in its
    terminal value and driver.  Law-dependent problems need it for the directional
    derivative to match finite differences; the terminal value then differs from
    dg/dx.
    """
    grid = ensemble.grid
    X, xpre, dB = ensemble.X, ensemble.x_pre, ensemble.dB
    N, n, d, dt = X.shape[0], grid.n_steps, grid.delay_steps, grid.dt
    km = prob.n_moments
    mom = ensemble.moments(km)
    z = prob.memory_features(ensemble)
    W = prob.memory_weights(grid)
    jumps = _jumps(ensemble.xi)
    times = grid.times

    p0 = np.zeros((N, n + 1))
    q0 = np.zeros((N, n + 1))
    p1 = np.zeros((N, n + 1, km))
    q1 = np.zeros((N, n + 1, km))
    left = np.zeros((N, n + 1))
    se = np.zeros((N, n + 1))
    drv = np.zeros((N, n + 1))
    h0_xi = np.zeros((N, n + 1))
    dM = np.zeros((N, n))
    path = np.zeros((N, n + 1))
    path_left = np.zeros((N, n + 1))
    # memory gradient of the Hamiltonian per step, zero at and after T
    gz = np.zeros((N, n + d + 1, W.shape[0]))
    gz_path = np.zeros((N, n + d + 1, W.shape[0]))

    p0[:, n], p1[:, n] = _terminal_partials(prob.g, X[:, n], mom[n])
    if mean_field_feedback:
        p0[:, n] = p0[:, n] + _moment_gradient(X[:, n], km) @ p1[:, n].mean(axis=0)
    left[:, n] = p0[:, n] + _h_partial(prob.h, times[n], xpre[:, n]) * jumps[:, n]
    path[:, n], path_left[:, n] = p0[:, n], left[:, n]
    for k in range(n - 1, -1, -1):
        proj = Projector(_regression_features(X, z, k), degree, knots=knots)
        y = proj.project(left[:, k + 1])
        q = proj.project((left[:, k + 1] - y) * dB[:, k]) / dt
        args = (times[k], X[:, k], z[:, k, :], mom[k], ensemble.xi[:, k])
        bx, bz, bm, bxi = _partials(prob.b, *args)
        sx, sz, sm, sxi = _partials(prob.sigma, *args)
        fx, fz, fm, fxi = _partials(prob.f, *args)
        nxt = path_left[:, k + 1]
        qp = nxt * dB[:, k] / dt
        gz[:, k] = fz + bz * y[:, None] + sz * q[:, None]
        gz_path[:, k] = fz + bz * nxt[:, None] + sz * qp[:, None]
        if W.shape[0]:
            dual = proj.project(np.einsum("nrj,jr->n", gz[:, k: k + d + 1], W))
            dual_path = np.einsum("nrj,jr->n", gz_path[:, k: k + d + 1], W)
        else:
            dual = dual_path = 0.0
        if mean_field_feedback:
            grad = _moment_gradient(X[:, k], km)
            dual = dual + grad @ (fm + bm * y[:, None] + sm * q[:, None]).mean(axis=0)
            dual_path = dual_path + grad @ (fm + bm * nxt[:, None] + sm * qp[:, None]).mean(axis=0)
        path[:, k] = nxt + (fx + bx * nxt + sx * qp + dual_path) * dt
        drv[:, k] = fx + bx * y + sx * q + dual
        p0[:, k] = y + drv[:, k] * dt
        q0[:, k] = q
        se[:, k] = proj.standard_error(left[:, k + 1])
        dM[:, k] = left[:, k + 1] - y
        if prob.depends_on_xi:
            h0_xi[:, k] = fxi + bxi * nxt + sxi * qp
        hx_k = _h_partial(prob.h, times[k], xpre[:, k]) * jumps[:, k]
        left[:, k] = p0[:, k] + hx_k
        path_left[:, k] = path[:, k] + hx_k

        y1 = proj.project(p1[:, k + 1])
        q1[:, k] = proj.project((p1[:, k + 1] - y1) * dB[:, k, None]) / dt
        p1[:, k] = y1 + (fm + bm * y[:, None] + sm * q[:, None]) * dt
    return AdjointPair(p0=p0, q0=q0, p1=p1, q1=q1, p0_left=left, p0_path=path, p0_se=se,
                       driver=drv, dM=dM, h0_xi=h0_xi, grid=grid)


def payoff(prob: ControlProblem, ensemble: ParticleEnsemble) -> np.ndarray:
    """Per-particle realised objective: running profit + bequest + jump costs."""
    grid = ensemble.grid
    X, n, dt = ensemble.X, grid.n_steps, grid.dt
    mom = ensemble.moments(prob.n_moments)
    z = prob.memory_features(ensemble)
    times = grid.times
    total = np.zeros(X.shape[0])
    for k in range(n):
        total += np.asarray(prob.f(times[k], X[:, k], z[:, k, :], mom[k], ensemble.xi[:, k])) * dt
    total += np.asarray(prob.g(X[:, n], mom[n]), dtype=float)
    jumps = _jumps(ensemble.xi)
    for k in np.flatnonzero(np.any(jumps != 0, axis=0)):
        total += np.asarray(prob.h(times[k], ensemble.x_pre[:, k]), dtype=float) * jumps[:, k]
    return total


def _singular_density(prob: ControlProblem, ensemble: ParticleEnsemble, adj: AdjointPair,
                      pathwise: bool = False) -> np.ndarray:
    times = ensemble.grid.times
    p0 = adj.p0_path if pathwise else adj.p0
    lam = np.array([prob.lam_at(t) for t in times])
    hv = np.column_stack([np.broadcast_to(np.asarray(prob.h(t, ensemble.x_pre[:, k]), dtype=float),
                                          (ensemble.n_particles,))
                          for k, t in enumerate(times)])
    return lam * p0 + hv


# ---------------------------------------------------------------- perturbations

@dataclass
class Perturbation:
    """Signed perturbation path eta on the grid (per particle or shared) with radius eps."""

    eta: np.ndarray
    eps: float = 1.0
    name: str = ""

    def path(self, n_particles: int, n_points: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.eta, dtype=float), (n_particles, n_points))

    def check(self, xi_path: np.ndarray) -> None:
        """Raise unless xi + a eta is nondecreasing from xi(0-) = 0 for a in [0, eps]."""
        eta = self.path(*xi_path.shape)
        for a in (self.eps,):
            cand = xi_path + a * eta
            if np.any(cand[:, 0] < -1e-12) or np.any(np.diff(cand, axis=1) < -1e-12):
                raise InadmissiblePerturbation(f"{self.name or 'eta'}: xi + {a} eta is not a control")


def canonical_perturbations(xi_path: np.ndarray, grid: TimeGrid, t_jump: float,
                            size: float = 1.0) -> list[Perturbation]:
    """Jump of ``size`` at ``t_jump``, then eta = xi and eta = -xi."""
    k = grid.index(t_jump)
    step = np.zeros(grid.n_steps + 1)
    step[k:] = size
    return [Perturbation(step, eps=1.0, name="jump"),
            Perturbation(np.array(xi_path), eps=1.0, name="scale_up"),
            Perturbation(-np.array(xi_path), eps=1.0, name="scale_down")]


@dataclass
class DerivativeEstimate:
    value: float
    se: float
    per_particle: np.ndarray = field(repr=False)


def directional_derivative(prob: ControlProblem, ensemble: ParticleEnsemble, adj: AdjointPair,
                           eta: Perturbation, pathwise: bool = True) -> DerivativeEstimate:
    """E[ sum_k dH0/dxi eta_k dt + sum_k (lambda p0_k + h_k) (eta_k - eta_{k-1}) ].

    Since eta is adapted, p0 may be replaced by its pathwise version (the default);
    ``pathwise=False`` uses the regression p0 and inherits its basis bias.
    """
    eta.check(ensemble.xi)
    grid = ensemble.grid
    path = eta.path(*ensemble.xi.shape)
    per = np.sum(_singular_density(prob, ensemble, adj, pathwise) * _jumps(path), axis=1)
    if prob.depends_on_xi:
        per = per + np.sum(adj.h0_xi[:, : grid.n_steps] * path[:, : grid.n_steps], axis=1) * grid.dt
    return DerivativeEstimate(float(per.mean()), _se(per), per)


def _se(v: np.ndarray) -> float:
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def finite_difference(prob: ControlProblem, ensemble: ParticleEnsemble, eta: Perturbation,
                      a: float) -> DerivativeEstimate:
    """(J(xi + a eta) - J(xi)) / a with the ensemble's Brownian increments reused."""
    eta.check(ensemble.xi)
    grid = ensemble.grid
    N = ensemble.n_particles
    base = prob.simulate(ensemble.xi, grid, N, increments=ensemble.dB)
    bumped = prob.simulate(ensemble.xi + a * eta.path(*ensemble.xi.shape), grid, N,
                           increments=ensemble.dB)
    per = (payoff(prob, bumped) - payoff(prob, base)) / a
    return DerivativeEstimate(float(per.mean()), _se(per), per)


def derivative_table(prob: ControlProblem, ensemble: ParticleEnsemble, adj: AdjointPair,
                     perturbations: list[Perturbation], a_values=(1e-2, 1e-3),
                     rel_tol: float = 0.05, atol: float = 1e-9) -> list[dict]:
    """Analytic derivative against common-random-number finite differences.

    One row per perturbation and step a, plus an ``a = 0`` row holding the
    Richardson combination of the two steps, which removes the O(a) curvature
    term (a J''/2) of the one-sided quotient; at a stationary control that term
    is the whole quotient.  A row passes when |analytic - fd| <= max(3 se,
    rel_tol |fd|) + atol, with se the standard error of the per-particle
    difference; ``atol`` covers the round-off of the central-difference partials.
    """
    def row(name, a, rhs, fd):
        diff = rhs.per_particle - fd.per_particle
        se = _se(diff)
        gap = abs(rhs.value - fd.value)
        tol = max(3 * se, rel_tol * abs(fd.value))
        return {"perturbation": name, "a": a, "analytic": rhs.value, "analytic_se": rhs.se,
                "finite_difference": fd.value, "fd_se": fd.se, "gap": gap, "gap_se": se,
                "tol": tol, "ok": bool(gap <= tol + atol)}

    rows = []
    for eta in perturbations:
        rhs = directional_derivative(prob, ensemble, adj, eta)
        fds = [finite_difference(prob, ensemble, eta, a) for a in a_values]
        rows.extend(row(eta.name, a, rhs, fd) for a, fd in zip(a_values, fds))
        if len(a_values) == 2:
            (a1, a2), (f1, f2) = a_values, fds
            per = (a1 * f2.per_particle - a2 * f1.per_particle) / (a1 - a2)
            rows.append(row(eta.name, 0.0, rhs, DerivativeEstimate(float(per.mean()), _se(per), per)))
    return rows


def derivatives_ok(table: list[dict]) -> bool:
    """Pass/fail of a derivative table on its extrapolated rows (all rows if none)."""
    rows = [r for r in table if r["a"] == 0.0] or table
    return all(r["ok"] for r in rows)


# ---------------------------------------------------------------- optimality checks

def check_necessary(prob: ControlProblem, ensemble: ParticleEnsemble, adj: AdjointPair,
                    slack: float = 0.0, atol: float = 1e-10) -> dict:
    """Sign condition E[lambda p0 + h | F_t] <= 0 and complementarity sum_t E[.] dxi ~ 0.

    The conditional expectation is the regression estimate carried by p0, so its
    error bar is the regression standard error scaled by |lambda|.  The sign check
    passes when max(density - 3 se) <= slack.  The complementarity sum weights the
    density by the adapted jumps, so it is estimated with the pathwise adjoint and
    passes when |mean sum_k density_k J_k| <= 3 se + atol.
    """
    if prob.depends_on_xi:
        raise ValueError("the variational inequalities assume dH0/dxi = 0")
    dens = _singular_density(prob, ensemble, adj)
    lam = np.abs([prob.lam_at(t) for t in ensemble.grid.times])
    err = lam * adj.p0_se
    excess = dens - 3 * err
    worst = np.unravel_index(np.argmax(excess), excess.shape)
    per = np.sum(_singular_density(prob, ensemble, adj, pathwise=True) * _jumps(ensemble.xi), axis=1)
    comp, comp_se = float(per.mean()), _se(per)
    sign_ok = bool(excess[worst] <= slack)
    comp_ok = bool(abs(comp) <= 3 * comp_se + atol)
    return {
        "max_violation_sign_condition": float(dens.max()),
        "max_excess_over_slack": float(excess[worst]),
        "violation_time": float(ensemble.grid.times[worst[1]]),
        "complementarity_sum": comp,
        "complementarity_se": comp_se,
        "density_path": dens.mean(axis=0),
        "sign_ok": sign_ok,
        "complementarity_ok": comp_ok,
        "ok": sign_ok and comp_ok,
    }


def check_sufficient(prob: ControlProblem, ensemble: ParticleEnsemble, adj: AdjointPair,
                     n_probes: int = 1000, seed: int = 0, tol: float = 1e-6,
                     raise_on_fail: bool = True) -> dict:
    """Necessary-condition report plus sampled concavity of g and of the rate Hamiltonian.

    Second differences along random unit directions in (x, z, m) at random
    (particle, time) points; the largest one must not exceed ``tol``.
    """
    grid = ensemble.grid
    rng = np.random.default_rng(seed)
    N, n = ensemble.n_particles, grid.n_steps
    mom = ensemble.moments(prob.n_moments)
    z = prob.memory_features(ensemble)
    J, km = z.shape[2], prob.n_moments
    dim = 1 + J + km
    idx = rng.integers(N, size=n_probes)
    kk = rng.integers(n, size=n_probes)
    u = rng.standard_normal((n_probes, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    s = 1e-3

    def h0(i, k, v):
        x, zz, m = v[:1], v[1:1 + J][None, :], v[1 + J:]
        xi = ensemble.xi[i: i + 1, k]
        t = grid.times[k]
        return float(np.asarray(prob.f(t, x, zz, m, xi))[0]
                     + np.asarray(prob.b(t, x, zz, m, xi))[0] * adj.p0[i, k]
                     + np.asarray(prob.sigma(t, x, zz, m, xi))[0] * adj.q0[i, k])

    def g(v):
        return float(np.asarray(prob.g(v[:1], v[1 + J:]))[0])

    curv_h, curv_g = -np.inf, -np.inf
    for j in range(n_probes):
        i, k = int(idx[j]), int(kk[j])
        v = np.concatenate([[ensemble.X[i, k]], z[i, k], mom[k]])
        step = s * (1.0 + np.abs(v).max())
        w = u[j] * step
        curv_h = max(curv_h, (h0(i, k, v + w) - 2 * h0(i, k, v) + h0(i, k, v - w)) / step ** 2)
        vT = np.concatenate([[ensemble.X[i, n]], z[i, n], mom[n]])
        stepT = s * (1.0 + np.abs(vT).max())
        wT = u[j] * stepT
        curv_g = max(curv_g, (g(vT + wT) - 2 * g(vT) + g(vT - wT)) / stepT ** 2)
    max_curv = max(curv_h, curv_g)
    concave = bool(max_curv <= tol)
    if not concave and raise_on_fail:
        raise NotConcave(f"positive curvature {max_curv:.3g} found; sufficiency does not apply")
    report = check_necessary(prob, ensemble, adj) if not prob.depends_on_xi else {}
    report.update({"concavity_max_curvature": float(max_curv),
                   "hamiltonian_max_curvature": float(curv_h),
                   "terminal_max_curvature": float(curv_g), "concave": concave})
    return report


# ---------------------------------------------------------------- threshold search

@dataclass
class ReflectionPolicy:
    """Minimal pushing that keeps X below a(t) = level + slope sqrt(T - t) (above, if lambda > 0)."""

    level: float
    slope: float
    T: float
    lam: float

    def boundary(self, t: float) -> float:
        return self.level + self.slope * np.sqrt(max(self.T - t, 0.0))

    def increment(self, k: int, t: float, x_pre: np.ndarray) -> np.ndarray:
        a = self.boundary(t)
        if self.lam < 0:
            return np.maximum(x_pre - a, 0.0) / -self.lam
        return np.maximum(a - x_pre, 0.0) / self.lam


@dataclass
class ThresholdSearch:
    levels: np.ndarray
    slopes: np.ndarray
    J: np.ndarray            # (len(slopes), len(levels))
    J_se: np.ndarray         # standard error of J - J(best) under common noise
    best_level: float
    best_slope: float
    effort: np.ndarray       # E[int_0^T xi dt] per boundary, used to break ties
    best_index: tuple = (0, 0)

    @property
    def level_interior(self) -> bool:
        j = self.best_index[1]
        return 0 < j < self.levels.size - 1

    def level_curve_concavity(self) -> float:
        """Largest second difference of J in level along the best slope, in units of its se."""
        i = self.best_index[0]
        row, se = self.J[i], self.J_se[i]
        if row.size < 3:
            return 0.0
        second = row[2:] - 2 * row[1:-1] + row[:-2]
        scale = np.sqrt(se[2:] ** 2 + 4 * se[1:-1] ** 2 + se[:-2] ** 2) + 1e-300
        return float(np.max(second / scale))


def _constant_lambda(prob: ControlProblem, grid: TimeGrid) -> float:
    lam = np.array([prob.lam_at(t) for t in grid.times])
    if not np.allclose(lam, lam[0], rtol=0, atol=1e-14) or lam[0] >= 0:
        raise LambdaNotConstantNegative("lambda must be a negative constant")
    return float(lam[0])


def optimize_threshold(prob: ControlProblem, levels, grid: TimeGrid, n_particles: int,
                       seed: int = 0, slopes=(0.0,), threads: int = 1) -> ThresholdSearch:
    """Grid search of J over reflection boundaries, all runs sharing one noise draw."""
    lam = _constant_lambda(prob, grid)
    levels = np.asarray(levels, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    dB = None
    per = np.empty((slopes.size, levels.size, n_particles))
    effort = np.empty((slopes.size, levels.size))
    for i, s in enumerate(slopes):
        for j, a in enumerate(levels):
            ens = prob.simulate(ReflectionPolicy(a, s, grid.T, lam), grid, n_particles, seed,
                                threads, increments=dB)
            dB = ens.dB
            per[i, j] = payoff(prob, ens)
            effort[i, j] = float(np.mean(trapezoid(ens.xi, dx=grid.dt, axis=1)))
    J = per.mean(axis=2)
    # boundaries that differ only by pushes made anyway later tie to rounding;
    # among those prefer the pointwise smallest control
    top = J >= J.max() - 1e-12 * (1.0 + abs(J.max()))
    bi, bj = np.unravel_index(np.argmin(np.where(top, effort, np.inf)), J.shape)
    diff = per - per[bi, bj]
    se = diff.std(axis=2, ddof=1) / np.sqrt(n_particles)
    return ThresholdSearch(levels=levels, slopes=slopes, J=J, J_se=se,
                           best_level=float(levels[bj]), best_slope=float(slopes[bi]),
                           effort=effort, best_index=(int(bi), int(bj)))


# ---------------------------------------------------------------- stopping connection

@dataclass
class StoppingConnection:
    barrier: BarrierSpec
    solution: RbsdeSolution
    driver: DriverSpec
    first_move: np.ndarray     # per-particle index of the first control jump (n if none)


def assemble_stopping_connection(prob: ControlProblem, ensemble: ParticleEnsemble,
                                 adj: AdjointPair, move_tol: float = 1e-12) -> StoppingConnection:
    """Barrier S = h / lambda0, terminal R = dg/dx(X(T)), Y = p0, Z = q0, dK = dh/dx dxi.

    Requires lambda = -lambda0 constant; the driver is the one carried by the adjoint.
    """
    grid = ensemble.grid
    lam0 = -_constant_lambda(prob, grid)
    if prob.depends_on_xi:
        raise ValueError("the stopping connection assumes dH0/dxi = 0")
    times = grid.times
    N, n = ensemble.n_particles, grid.n_steps
    h = np.column_stack([np.broadcast_to(np.asarray(prob.h(t, ensemble.x_pre[:, k]), dtype=float),
                                         (N,)) for k, t in enumerate(times)])
    jumps = _jumps(ensemble.xi)
    hx = np.column_stack([_h_partial(prob.h, t, ensemble.x_pre[:, k]) for k, t in enumerate(times)])
    dK = hx * jumps
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        barrier = BarrierSpec(h / lam0, adj.p0[:, n], unsafe=True)
    sol = RbsdeSolution(Y=adj.p0, Z=adj.q0, K=np.cumsum(dK, axis=1), dK=dK, F=adj.driver,
                        dM=adj.dM, grid=grid)
    F_path = adj.driver

    def F(t, x, y, z, ybar, zbar, law):
        return F_path[:, grid.index(t)]

    moved = jumps > move_tol
    first = np.where(moved.any(axis=1), moved.argmax(axis=1), n)
    return StoppingConnection(barrier=barrier, solution=sol,
                              driver=DriverSpec(F, C=0.0, uses_advanced=False, name="adjoint"),
                              first_move=first)


def verify_connection(conn: StoppingConnection, ensemble: ParticleEnsemble, tol: float,
                      knots: int = 16) -> dict:
    """RbsdeSolution invariants of the assembled triple, stopping-time agreement and a re-solve."""
    inv = solution_invariants(conn.solution, conn.barrier, tol)
    tau = hitting_time(conn.solution, conn.barrier).index
    agreement = float(np.mean(tau == conn.first_move))
    resolved = solve_picard(conn.driver, conn.barrier, ensemble, max_iter=2, knots=knots)
    prob = StoppingProblem.from_solution(conn.solution, conn.barrier, ensemble)
    v_hit = stopped_values(prob, tau)
    v_move = stopped_values(prob, conn.first_move)
    return {
        "value_at_hit": float(v_hit.mean()),
        "value_at_first_move": float(v_move.mean()),
        "value_diff_se": _se(v_hit - v_move),
        "mean_step_gap": float(np.mean(np.abs(tau - conn.first_move))),
        "invariants": inv["checks"],
        "max_barrier_deficit": inv["max_barrier_deficit"],
        "skorokhod_residual": inv["skorokhod_residual"],
        "tau_agreement_rate": agreement,
        "y0_assembled": float(conn.solution.Y[:, 0].mean()),
        "y0_resolved": float(resolved.Y[:, 0].mean()),
        "ok": inv["ok"] and agreement >= 0.99,
    }


def control_report(necessary: dict, sufficient: dict | None, table: list[dict]) -> dict:
    """JSON-ready summary of the optimality checks."""
    return {
        "max_violation_sign_condition": necessary["max_violation_sign_condition"],
        "complementarity_sum": necessary["complementarity_sum"],
        "concavity_max_curvature": None if sufficient is None
        else sufficient["concavity_max_curvature"],
        "deriv_vs_fd_table": table,
    }
