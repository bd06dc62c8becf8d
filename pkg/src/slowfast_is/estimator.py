"""Monte Carlo driver: importance-sampling estimate, variance, relative error.

Trajectory ``i`` always draws from stream ``(seed, i)`` and trajectories are
grouped into fixed batches of ``batch_size`` paths.  The batch layout does
not depend on the number of workers, so serial and parallel runs give
bit-identical reports.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from ._format import fmt
from .errors import TooManyFailures
from .model import ModelSpec
from .simulate import Control, StepPolicy, simulate_paths

logger = logging.getLogger(__name__)

WORKERS_ENV = "SLOWFAST_IS_WORKERS"
DEFAULT_BATCH_SIZE = 2500
REPORT_COLUMNS = (
    "beta", "epsilon", "N", "dt", "I_N", "varU", "reU", "stdErr", "R_c", "nClamped", "seed", "wallClock",
)


@dataclass
class EstimatorReport:
    I_N: float
    log_I_N: float
    var_u: float
    re_u: float
    std_err: float
    crossing_ratio: float
    N: int
    n_clamped: int
    seed: int
    wall_clock: float
    beta: float
    epsilon: float
    dt: float
    n_failed: int = 0

    def row(self, wall_clock: bool = True) -> list[str]:
        """CSV fields in :data:`REPORT_COLUMNS` order; ``wallClock`` left empty when disabled."""
        return [
            fmt(self.beta), fmt(self.epsilon), fmt(self.N), fmt(self.dt), fmt(self.I_N), fmt(self.var_u),
            fmt(self.re_u), fmt(self.std_err), fmt(self.crossing_ratio), fmt(self.n_clamped), fmt(self.seed),
            fmt(self.wall_clock) if wall_clock else "",
        ]

    def same_numbers(self, other: "EstimatorReport") -> bool:
        a, b = asdict(self), asdict(other)
        a.pop("wall_clock")
        b.pop("wall_clock")
        return a == b


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, int(workers))


def shifted_variance(values: np.ndarray) -> float:
    """1/N sample variance computed around the first sample.

    Identical samples give exactly 0, which the mean-centred formula does not
    guarantee (the mean itself carries rounding error).
    """
    d = np.asarray(values, dtype=float) - values[0]
    return max(0.0, float(np.mean(d * d) - np.mean(d) ** 2))


def summarize(payoff_log: np.ndarray) -> tuple[float, float, float, float]:
    """``(log I_N, I_N, Var_u I, RE_u)`` from per-path log payoffs.

    The sample variance uses the 1/N normalization and is computed on payoffs
    rescaled by the largest one, so no payoff is exponentiated on its own
    scale.
    """
    p = np.asarray(payoff_log, dtype=float)
    n = len(p)
    log_i = float(logsumexp(p) - math.log(n))
    if not np.isfinite(log_i):
        return log_i, math.exp(log_i) if log_i < 0 else math.nan, math.nan, math.nan
    top = float(p.max())
    ratio = np.exp(p - top)
    re2 = shifted_variance(ratio) / math.exp(2.0 * (log_i - top))
    with np.errstate(over="ignore"):
        # saturate to inf rather than raise for astronomically large payoffs
        i_n = float(np.exp(log_i))
        var = float(np.exp(2.0 * log_i)) * re2 if re2 > 0 else 0.0
    return log_i, i_n, var, math.sqrt(re2)


def _run_batch(args):
    model, control, policy, seed, start, stop, threshold = args
    batch = simulate_paths(model, control, policy, seed, range(start, stop), threshold)
    return batch.payoff_log, batch.final.crossed, batch.diverged, batch.n_clamped, batch.schedule.dt


def _batches(N: int, batch_size: int):
    return [(i, min(i + batch_size, N)) for i in range(0, N, batch_size)]


def estimate(
    model: ModelSpec,
    control: Control | None,
    policy: StepPolicy,
    N: int,
    seed: int,
    threshold: float = 0.0,
    workers: int | None = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_failure_fraction: float = 0.01,
) -> EstimatorReport:
    """Importance-sampling estimate of ``E[exp(-beta int h)]`` from ``N`` paths.

    Diverged paths are dropped from the statistics and counted; more than
    ``max_failure_fraction`` of them raises :class:`TooManyFailures`.
    """
    if N < 2:
        raise ValueError(f"need at least 2 trajectories, got N={N}")
    tic = time.perf_counter()
    jobs = [(model, control, policy, seed, a, b, threshold) for a, b in _batches(N, batch_size)]
    n_workers = min(resolve_workers(workers), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_batch, jobs))
    else:
        results = [_run_batch(job) for job in jobs]
    payoff = np.concatenate([r[0] for r in results])
    crossed = np.concatenate([r[1] for r in results])
    diverged = np.concatenate([r[2] for r in results])
    n_clamped = int(sum(r[3] for r in results))
    dt = results[0][4]

    n_failed = int(np.count_nonzero(diverged))
    if n_failed > max_failure_fraction * N:
        raise TooManyFailures(n_failed, N)
    if n_failed:
        logger.warning("%d of %d trajectories diverged and were dropped", n_failed, N)
    ok = ~diverged
    log_i, i_n, var, re = summarize(payoff[ok])
    n_ok = int(np.count_nonzero(ok))
    return EstimatorReport(
        I_N=i_n,
        log_I_N=log_i,
        var_u=var,
        re_u=re,
        std_err=math.sqrt(var / n_ok) if np.isfinite(var) else math.nan,
        crossing_ratio=float(np.count_nonzero(crossed[ok])) / n_ok,
        N=n_ok,
        n_clamped=n_clamped,
        seed=seed,
        wall_clock=time.perf_counter() - tic,
        beta=model.params.beta,
        epsilon=model.params.epsilon,
        dt=dt,
        n_failed=n_failed,
    )


def sweep_epsilon(
    model_family: Callable[[float], ModelSpec],
    control: Control | Callable[[ModelSpec], Control] | None,
    eps_list: Sequence[float],
    N: int,
    seed: int,
    policy: StepPolicy,
    **kwargs,
) -> list[tuple[float, EstimatorReport]]:
    """One report per epsilon, all sharing the same control ingredients.

    ``control`` is either a ready control (the averaged control does not
    depend on epsilon) or a builder called with each model.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty epsilon list")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError(f"epsilon list must be strictly decreasing, got {eps_list}")
    out = []
    for eps in eps_list:
        model = model_family(eps)
        ctl = control(model) if callable(control) and not hasattr(control, "evaluate") else control
        out.append((eps, estimate(model, ctl, policy, N, seed, **kwargs)))
    return out
