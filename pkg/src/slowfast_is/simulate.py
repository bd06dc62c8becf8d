"""Euler-Maruyama integration of controlled slow-fast SDEs.

Paths are simulated under the tilted measure, i.e. the drawn Gaussian
increments ``dW`` are those of the shifted Brownian motion
``dw_bar = sqrt(beta) u ds + dw``.  Each path carries

* ``log_z``  -- log of the likelihood ratio dP_bar/dP accumulated so far,
* ``cost``   -- the left-endpoint quadrature of ``int h(x_r) dr``,
* ``crossed`` -- whether ``x[0]`` reached the barrier threshold at a grid time.

The per-path estimator summand is ``exp(payoff_log)`` with
``payoff_log = -beta * cost - log_z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import IntegrationDiverged, ModelError
from .model import ModelSpec

DT_RULES = ("fixed", "epsilon-scaled")


class Control(Protocol):
    def evaluate(self, s: float, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, int]:
        """Return ``(u1, u2, n_clamped)``; ``u2 is None`` means no fast-channel control."""


@dataclass(frozen=True)
class StepPolicy:
    """Time step selection.

    With ``dt_rule="epsilon-scaled"`` the step is ``min(dt_slow, eps_factor * epsilon)``.
    """

    dt_slow: float = 1e-4
    dt_rule: str = "epsilon-scaled"
    eps_factor: float = 0.1

    def __post_init__(self):
        if not self.dt_slow > 0:
            raise ValueError(f"dt_slow must be positive, got {self.dt_slow}")
        if self.dt_rule not in DT_RULES:
            raise ValueError(f"dt_rule must be one of {DT_RULES}, got {self.dt_rule!r}")
        if not self.eps_factor > 0:
            raise ValueError(f"eps_factor must be positive, got {self.eps_factor}")

    @classmethod
    def reference_accuracy(cls) -> "StepPolicy":
        """Reference-accuracy steps: ``min(1e-7, 1e-5 * epsilon)`` (very slow)."""
        return cls(dt_slow=1e-7, dt_rule="epsilon-scaled", eps_factor=1e-5)

    def dt(self, epsilon: float) -> float:
        if self.dt_rule == "fixed":
            return self.dt_slow
        return min(self.dt_slow, self.eps_factor * epsilon)

    def schedule(self, t0: float, T: float, epsilon: float) -> "StepSchedule":
        dt = self.dt(epsilon)
        ratio = (T - t0) / dt
        nearest = round(ratio)
        if nearest >= 1 and abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
            return StepSchedule(t0, int(nearest), dt, dt, False)
        n = math.ceil(ratio)
        last = (T - t0) - (n - 1) * dt
        return StepSchedule(t0, n, dt, last, True)


@dataclass(frozen=True)
class StepSchedule:
    t0: float
    n_steps: int
    dt: float
    last_dt: float
    partial: bool  # final step shorter than dt

    def step(self, i: int) -> tuple[float, float]:
        """Start time and length of step ``i``."""
        s = self.t0 + i * self.dt
        return s, (self.last_dt if i == self.n_steps - 1 else self.dt)


@dataclass(frozen=True)
class RngStream:
    """Counter-based Gaussian stream addressed by ``(seed, stream_id)``.

    Streams with different ids are independent; the same pair always
    reproduces the same draws, whatever order trajectories are scheduled in.
    """

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PathState:
    """State of one path or a batch of paths (leading batch axis)."""

    s: float
    x: np.ndarray
    y: np.ndarray
    log_z: np.ndarray
    cost: np.ndarray
    crossed: np.ndarray

    @classmethod
    def initial(cls, model: ModelSpec, n: int | None = None) -> "PathState":
        p = model.params
        if n is None:
            return cls(p.t0, np.array(p.x0), np.array(p.y0), np.float64(0.0), np.float64(0.0), np.bool_(False))
        return cls(
            p.t0,
            np.tile(np.array(p.x0), (n, 1)),
            np.tile(np.array(p.y0), (n, 1)),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n, dtype=bool),
        )


def payoff_log_of(state: PathState, beta: float):
    """Log of ``exp(-beta int h) / Z`` for the accumulated state."""
    return -beta * state.cost - state.log_z


def _apply(mat, vec):
    # mat broadcastable to (n, a, b), vec (n, b) -> (n, a)
    if np.ndim(mat) == 0 or np.size(mat) == 1:
        return np.reshape(mat, ()) * vec
    return np.matmul(mat, vec[..., None])[..., 0]


def _advance(
    state: PathState,
    model: ModelSpec,
    control: Control | None,
    dt: float,
    dW1: np.ndarray,
    dW2: np.ndarray,
    threshold: float,
) -> tuple[PathState, int]:
    p = model.params
    x, y = state.x, state.y
    sb = p.beta**-0.5
    se = p.epsilon**-0.5

    a1 = model.alpha1(x)
    a2 = model.alpha2(x, y)
    drift_x = model.f(x, y)
    drift_y = model.g(x, y) / p.epsilon
    log_z = state.log_z
    n_clamped = 0
    if control is not None:
        u1, u2, n_clamped = control.evaluate(state.s, x, y)
        drift_x = drift_x - _apply(a1, u1)
        # Girsanov in terms of the drawn (tilted) increments
        log_z = log_z + (
            -math.sqrt(p.beta) * np.sum(u1 * dW1, axis=-1) + 0.5 * p.beta * np.sum(u1 * u1, axis=-1) * dt
        )
        if u2 is not None:
            drift_y = drift_y - se * _apply(a2, u2)
            log_z = log_z + (
                -math.sqrt(p.beta) * np.sum(u2 * dW2, axis=-1) + 0.5 * p.beta * np.sum(u2 * u2, axis=-1) * dt
            )
    cost = state.cost + model.h(x) * dt
    x_new = x + drift_x * dt + sb * _apply(a1, dW1)
    y_new = y + drift_y * dt + (sb * se) * _apply(a2, dW2)
    crossed = state.crossed | (x_new[..., 0] >= threshold)
    return PathState(state.s + dt, x_new, y_new, log_z, cost, crossed), n_clamped


def em_step(
    state: PathState,
    model: ModelSpec,
    control: Control | None,
    dt: float,
    dW1: np.ndarray,
    dW2: np.ndarray,
    threshold: float = 0.0,
) -> PathState:
    """One Euler-Maruyama step of the controlled slow-fast system.

    ``dW1`` and ``dW2`` are the tilted-measure increments, ``N(0, dt I)``.
    Works on a single state (``x`` of shape ``(k,)``) or a batch.

    Raises
    ------
    IntegrationDiverged
        If any component of the new state is not finite.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    single = np.ndim(state.x) == 1
    if single:
        state = PathState(
            state.s,
            state.x[None, :],
            state.y[None, :],
            np.atleast_1d(state.log_z),
            np.atleast_1d(state.cost),
            np.atleast_1d(state.crossed),
        )
        dW1 = np.atleast_2d(dW1)
        dW2 = np.atleast_2d(dW2)
    with np.errstate(all="ignore"):
        new, _ = _advance(state, model, control, dt, dW1, dW2, threshold)
    if not (np.all(np.isfinite(new.x)) and np.all(np.isfinite(new.y)) and np.all(np.isfinite(new.log_z))):
        raise IntegrationDiverged(new.s)
    if single:
        new = PathState(new.s, new.x[0], new.y[0], new.log_z[0], new.cost[0], new.crossed[0])
    return new


def noise_chunks(seed: int, stream_ids: Sequence[int], n_steps: int, width: int, chunk_steps: int = 128):
    """Yield ``(first_step, z)`` with ``z`` of shape ``(steps, n, width)``, standard normal.

    Row ``r`` of every chunk comes from stream ``(seed, stream_ids[r])``; each
    step consumes exactly ``width`` draws per stream.
    """
    gens = [RngStream(seed, int(i)).generator() for i in stream_ids]
    buf = np.empty((len(gens), max(1, min(chunk_steps, n_steps)), width))
    for start in range(0, n_steps, chunk_steps):
        steps = min(chunk_steps, n_steps - start)
        z = buf[:, :steps]
        for r, g in enumerate(gens):
            g.standard_normal(out=z[r])
        # step-major copy so each step reads contiguous memory
        yield start, np.ascontiguousarray(z.transpose(1, 0, 2))


@dataclass
class PathBatch:
    """Outcome of simulating a batch of independent paths."""

    final: PathState
    payoff_log: np.ndarray
    diverged: np.ndarray
    diverged_at: np.ndarray
    n_clamped: int
    schedule: StepSchedule


def simulate_paths(
    model: ModelSpec,
    control: Control | None,
    policy: StepPolicy,
    seed: int,
    stream_ids: Sequence[int],
    threshold: float = 0.0,
    chunk_steps: int = 128,
) -> PathBatch:
    """Simulate the paths ``stream_ids`` in lockstep.

    Diverged paths are flagged rather than raised; their payoff is NaN.
    """
    p = model.params
    sched = policy.schedule(p.t0, p.T, p.epsilon)
    n = len(stream_ids)
    if n == 0:
        raise ValueError("no trajectories requested")
    m1, m2 = model.m1, model.m2
    state = PathState.initial(model, n)
    diverged = np.zeros(n, dtype=bool)
    diverged_at = np.full(n, np.nan)
    n_clamped = 0
    with np.errstate(all="ignore"):
        for start, z in noise_chunks(seed, stream_ids, sched.n_steps, m1 + m2, chunk_steps):
            for j in range(len(z)):
                s, dt = sched.step(start + j)
                if state.s != s:
                    state = replace(state, s=s)
                dW = z[j] * math.sqrt(dt)
                state, nc = _advance(state, model, control, dt, dW[:, :m1], dW[:, m1:], threshold)
                n_clamped += nc
                if (start + j) % 64 == 63 or start + j == sched.n_steps - 1:
                    bad = ~(
                        np.isfinite(state.x).all(axis=-1)
                        & np.isfinite(state.y).all(axis=-1)
                        & np.isfinite(state.log_z)
                    )
                    fresh = bad & ~diverged
                    if fresh.any():
                        diverged_at[fresh] = state.s
                        diverged |= fresh
    # pin down the state time exactly
    state = PathState(p.T, state.x, state.y, state.log_z, state.cost, state.crossed)
    payoff = payoff_log_of(state, p.beta)
    payoff = np.where(diverged, np.nan, payoff)
    return PathBatch(state, payoff, diverged, diverged_at, n_clamped, sched)


def run_trajectory(
    model: ModelSpec,
    control: Control | None,
    policy: StepPolicy,
    rng: RngStream,
    threshold: float = 0.0,
) -> tuple[PathState, float]:
    """Simulate one path over ``[t0, T]``.

    Returns the final state and ``payoff_log = -beta * int h - log Z``.
    """
    if model.k < 1 or model.l < 1:
        raise ModelError("model needs at least one slow and one fast component")
    batch = simulate_paths(model, control, policy, rng.seed, [rng.stream_id], threshold)
    if batch.diverged[0]:
        raise IntegrationDiverged(batch.diverged_at[0])
    f = batch.final
    state = PathState(f.s, f.x[0], f.y[0], f.log_z[0], f.cost[0], f.crossed[0])
    return state, float(batch.payoff_log[0])
