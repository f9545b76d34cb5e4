"""Time grids, path segments, singular controls and reproducible Brownian noise."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NonCommensurate",
    "OutOfRange",
    "TimeGrid",
    "make_grid",
    "MemorySegment",
    "AdvancedSegment",
    "memory_segment",
    "advanced_segment",
    "SingularControl",
    "control_eval",
    "RngStream",
    "brownian_increments",
    "brownian_matrix",
]

_COMMENSURATE_TOL = 1e-9


class NonCommensurate(ValueError):
    """Horizon or delay is not an integer multiple of the time step."""


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with a delay window of ``delay_steps`` steps."""

    T: float
    dt: float
    n_steps: int
    delay_steps: int
    t0: float = 0.0

    @property
    def delta(self) -> float:
        return self.delay_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def extended_times(self) -> np.ndarray:
        """Grid times on [-delta, T]; column j of a particle path lives here."""
        return self.dt * np.arange(-self.delay_steps, self.n_steps + 1)

    @property
    def advanced_times(self) -> np.ndarray:
        """Grid times on [0, T + delta] used by advanced (forward-looking) processes."""
        return self.dt * np.arange(self.n_steps + self.delay_steps + 1)

    def index(self, t: float) -> int:
        """Nearest grid index of time ``t`` in [0, T]."""
        if t < -1e-12 or t > self.T + 1e-12:
            raise OutOfRange(f"t={t} outside [0, {self.T}]")
        return int(round((t - self.t0) / self.dt))


def _as_steps(length: float, dt: float, what: str) -> int:
    ratio = length / dt
    n = int(round(ratio))
    if abs(ratio - n) > _COMMENSURATE_TOL * max(1.0, abs(ratio)):
        raise NonCommensurate(f"{what}={length} is not an integer multiple of dt={dt}")
    return n


def make_grid(T: float, dt: float, delta: float = 0.0) -> TimeGrid:
    if T <= 0 or dt <= 0 or delta < 0:
        raise ValueError("need T > 0, dt > 0 and delta >= 0")
    n_steps = _as_steps(T, dt, "T")
    delay_steps = _as_steps(delta, dt, "delta")
    # keep n_steps * dt == T exactly
    return TimeGrid(T=float(n_steps * dt), dt=float(dt), n_steps=n_steps, delay_steps=delay_steps)


@dataclass(frozen=True)
class MemorySegment:
    """Backward window ``{x(t - s)}`` for offsets s = 0, dt, ..., delta."""

    values: np.ndarray
    dt: float
    orientation: str = "backward"

    @property
    def offsets(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[-1])


@dataclass(frozen=True)
class AdvancedSegment:
    """Forward window ``{y(t + r)}`` for offsets r = 0, dt, ..., delta."""

    values: np.ndarray
    dt: float
    orientation: str = "forward"

    @property
    def offsets(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[-1])


def memory_segment(path: np.ndarray, grid: TimeGrid, t_index: int) -> MemorySegment:
    """Backward window of a path stored on ``grid.extended_times``.

    Works on a single path (1-d) or a particle block (2-d, particles first).
    Windows reaching before time 0 read the initial path.
    """
    d = grid.delay_steps
    col = t_index + d
    window = np.asarray(path)[..., col - d: col + 1][..., ::-1]
    return MemorySegment(values=window, dt=grid.dt)


def advanced_segment(process: np.ndarray, grid: TimeGrid, t_index: int,
                     terminal=None) -> AdvancedSegment:
    """Forward window of a process stored on [0, T].

    Entries past T are frozen at ``terminal`` (defaults to the value at T), which
    is the convention Y(t) = R for t >= T; pass ``terminal=0`` for Z.
    """
    process = np.asarray(process, dtype=float)
    n, d = grid.n_steps, grid.delay_steps
    stop = t_index + d + 1
    window = process[..., t_index:min(stop, n + 1)]
    missing = stop - (n + 1)
    if missing > 0:
        fill = process[..., n:n + 1] if terminal is None else np.full(
            process.shape[:-1] + (1,), terminal, dtype=float)
        pad = np.repeat(fill, missing, axis=-1)
        window = np.concatenate([window, pad], axis=-1)
    return AdvancedSegment(values=window, dt=grid.dt)


@dataclass(frozen=True)
class SingularControl:
    """Nondecreasing right-continuous step control with xi(0-) = 0."""

    jump_times: tuple = ()
    jump_sizes: tuple = ()

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        sizes = np.asarray(self.jump_sizes, dtype=float)
        if times.shape != sizes.shape:
            raise ValueError("jump_times and jump_sizes differ in length")
        if np.any(sizes < 0):
            raise ValueError("jump sizes must be nonnegative")
        order = np.argsort(times, kind="stable")
        object.__setattr__(self, "jump_times", tuple(times[order].tolist()))
        object.__setattr__(self, "jump_sizes", tuple(sizes[order].tolist()))

    @classmethod
    def zero(cls) -> "SingularControl":
        return cls()

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Values xi(t_k) at every grid time (right-continuous)."""
        out = np.zeros(grid.n_steps + 1)
        for t, s in zip(self.jump_times, self.jump_sizes):
            out[grid.index(t):] += s
        return out


def control_eval(xi: SingularControl, t: float, T: float | None = None) -> float:
    if t < 0 or (T is not None and t > T):
        raise OutOfRange(f"t={t} outside [0, {T}]")
    times = np.asarray(xi.jump_times)
    sizes = np.asarray(xi.jump_sizes)
    # tolerance so that grid times computed as k*dt still count as "at" a jump
    return float(sizes[times <= t + 1e-12].sum())


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream: key (seed, particle_id), position = step."""

    seed: int
    particle_id: int = 0
    step: int = 0

    def generator(self) -> np.random.Generator:
        key = (int(self.seed) % 2**64) + (int(self.particle_id) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def increment(self, grid: TimeGrid) -> float:
        return float(brownian_increments(self, grid)[self.step])


def brownian_increments(stream: RngStream, grid: TimeGrid) -> np.ndarray:
    """The ``n_steps`` N(0, dt) increments of one particle."""
    z = stream.generator().standard_normal(grid.n_steps)
    return np.sqrt(grid.dt) * z


def brownian_matrix(seed: int, n_particles: int, grid: TimeGrid, threads: int = 1,
                    first_particle: int = 0) -> np.ndarray:
    """Increments for particles ``first_particle ... first_particle + n - 1``.

    Each row depends only on (seed, particle id), so the result is the same
    for any thread count.
    """
    out = np.empty((n_particles, grid.n_steps))

    def fill(rows):
        for i in rows:
            out[i] = brownian_increments(RngStream(seed, first_particle + i), grid)

    chunks = np.array_split(np.arange(n_particles), max(1, threads))
    if threads <= 1:
        fill(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    return out
