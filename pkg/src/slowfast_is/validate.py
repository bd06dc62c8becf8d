"""Empirical checks of the structural properties behind the estimator.

* strong approximation of the slow variable by the averaged dynamics,
  measured on coupled pairs driven by the same slow-channel noise,
* exact zero variance when the running cost is constant,
* the likelihood-ratio martingale identity (``E[1/Z] = 1``),
* closeness of the averaged control to the full-oracle control.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._format import fmt
from .errors import IntegrationDiverged, ModelError
from .estimator import DEFAULT_BATCH_SIZE, EstimatorReport, estimate, resolve_workers, shifted_variance
from .model import ModelSpec, check_dissipativity, zero_cost
from .simulate import Control, PathState, StepPolicy, _advance, _apply, noise_chunks, simulate_paths

CONVERGENCE_COLUMNS = ("epsilon", "metric", "value", "stderr")


@dataclass
class StrongErrorReport:
    """``max_s E|x_s - xbar_s|^4`` over the recorded times, with a bootstrap error."""

    value: float
    stderr: float
    times: np.ndarray
    moments: np.ndarray
    epsilon: float
    N: int


def _coupled_batch(args):
    model, avg_drift, policy, seed, start, stop, record_every = args
    p = model.params
    sched = policy.schedule(p.t0, p.T, p.epsilon)
    m1, m2 = model.m1, model.m2
    sb = p.beta**-0.5
    n = stop - start
    full = PathState.initial(model, n)
    xbar = full.x.copy()
    rows, times = [], []
    with np.errstate(all="ignore"):
        for first, z in noise_chunks(seed, range(start, stop), sched.n_steps, m1 + m2):
            for j in range(len(z)):
                i = first + j
                _, dt = sched.step(i)
                dW = z[j] * math.sqrt(dt)
                # the averaged path takes the same dW1 and the same update form
                xbar = xbar + avg_drift(xbar) * dt + sb * _apply(model.alpha1(xbar), dW[:, :m1])
                full, _ = _advance(full, model, None, dt, dW[:, :m1], dW[:, m1:], math.inf)
                if (i + 1) % record_every == 0 or i == sched.n_steps - 1:
                    d2 = np.sum((full.x - xbar) ** 2, axis=-1)
                    if not (np.all(np.isfinite(d2)) and np.all(np.isfinite(full.y))):
                        raise IntegrationDiverged(full.s)
                    rows.append(d2 * d2)
                    times.append(sched.t0 + (i + 1) * sched.dt if i < sched.n_steps - 1 else p.T)
    return np.array(times), np.stack(rows, axis=1)


def strong_error_4th(
    model: ModelSpec,
    eps: float,
    N: int,
    seed: int,
    policy: StepPolicy | None = None,
    averaged_drift=None,
    n_times: int = 100,
    n_blocks: int = 20,
    n_boot: int = 400,
    workers: int | None = None,
) -> StrongErrorReport:
    """Fourth-moment distance between the slow path and its averaged limit.

    Both paths start at ``x0`` and share the slow-channel increments
    ``dW1``; the averaged path uses the same step as the full one.  The
    error is the maximum over ``n_times`` recorded times of the sample mean
    of ``|x - xbar|^4``; its standard error comes from a bootstrap over
    contiguous trajectory blocks.

    Raises
    ------
    DissipativityViolation
        If the fast subsystem fails the contraction probe.
    ModelError
        If no averaged drift is available.
    IntegrationDiverged
        If any coupled pair blows up.
    """
    if N < 2:
        raise ValueError(f"need at least 2 pairs, got N={N}")
    model = model.with_params(epsilon=float(eps))
    check_dissipativity(model)
    avg_drift = averaged_drift if averaged_drift is not None else model.averaged_drift
    if avg_drift is None:
        raise ModelError("strong error needs an averaged drift (closed form or estimated)")
    policy = policy or StepPolicy()
    sched = policy.schedule(model.params.t0, model.params.T, model.params.epsilon)
    record_every = max(1, sched.n_steps // n_times)

    jobs = [
        (model, avg_drift, policy, seed, a, min(a + DEFAULT_BATCH_SIZE, N), record_every)
        for a in range(0, N, DEFAULT_BATCH_SIZE)
    ]
    n_workers = min(resolve_workers(workers), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_coupled_batch, jobs))
    else:
        results = [_coupled_batch(job) for job in jobs]
    times = results[0][0]
    per_path = np.concatenate([r[1] for r in results], axis=0)

    moments = per_path.mean(axis=0)
    value = float(moments.max())
    blocks = np.array_split(np.arange(N), min(n_blocks, N))
    block_sums = np.stack([per_path[b].sum(axis=0) for b in blocks])
    block_sizes = np.array([len(b) for b in blocks], dtype=float)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(blocks), size=(n_boot, len(blocks)))
    boot = (block_sums[picks].sum(axis=1) / block_sizes[picks].sum(axis=1)[:, None]).max(axis=1)
    return StrongErrorReport(value, float(np.std(boot)), times, moments, model.params.epsilon, N)


@dataclass
class ZeroVarianceReport:
    payoff: float
    variance: float
    expected: float
    N: int


def _probe_constant(h, k: int, seed: int = 0) -> float:
    x = np.random.default_rng(seed).uniform(-10.0, 10.0, size=(64, k))
    vals = np.asarray(h(x), dtype=float)
    if not np.all(vals == vals[0]):
        raise ModelError("running cost is not constant")
    return float(vals[0])


def zero_variance_check(model: ModelSpec, N: int, seed: int, policy: StepPolicy | None = None) -> ZeroVarianceReport:
    """Uncontrolled run of a constant-cost problem; every payoff must coincide.

    With ``h = c`` the payoff ``exp(-beta c (T - t0))`` does not depend on the
    path, so the sample variance is exactly zero.
    """
    c = _probe_constant(model.h, model.k)
    p = model.params
    batch = simulate_paths(model, None, policy or StepPolicy(), seed, range(N))
    if batch.diverged.any():
        raise IntegrationDiverged(float(np.nanmin(batch.diverged_at)))
    payoff = np.exp(batch.payoff_log)
    return ZeroVarianceReport(
        payoff=float(payoff[0]),
        variance=shifted_variance(payoff),
        expected=math.exp(-p.beta * c * (p.T - p.t0)),
        N=N,
    )


@dataclass
class MartingaleReport:
    mean: float
    std_err: float
    z_score: float
    report: EstimatorReport


def martingale_check(
    model: ModelSpec,
    control: Control | None,
    N: int,
    seed: int,
    policy: StepPolicy | None = None,
    **kwargs,
) -> MartingaleReport:
    """Mean of ``1/Z`` under the controlled measure; should equal 1.

    The running cost is replaced by zero, so the estimator summand is just
    the inverse likelihood ratio.
    """
    rep = estimate(model.with_cost(zero_cost()), control, policy or StepPolicy(), N, seed, **kwargs)
    z = (rep.I_N - 1.0) / rep.std_err if rep.std_err > 0 else (0.0 if rep.I_N == 1.0 else math.inf)
    return MartingaleReport(rep.I_N, rep.std_err, z, rep)


def control_gap_probe(
    suboptimal: Control,
    oracle: Control,
    lattice: tuple[Sequence[float], Sequence[float], Sequence[float]],
) -> tuple[float, float]:
    """Sup-norm distance between two controls on an ``(s, x, y)`` lattice.

    Returns ``(sup_gap, sup_u2)``: the largest componentwise difference over
    both channels (a missing fast-channel force counts as zero) and the
    largest fast-channel force of ``oracle``.
    """
    s_nodes, x_nodes, y_nodes = (np.asarray(a, dtype=float) for a in lattice)
    xx, yy = np.meshgrid(x_nodes, y_nodes, indexing="ij")
    xb = xx.reshape(-1, 1)
    yb = yy.reshape(-1, 1)
    gap = 0.0
    sup_u2 = 0.0
    for s in s_nodes:
        a1, a2, _ = suboptimal.evaluate(float(s), xb, yb)
        b1, b2, _ = oracle.evaluate(float(s), xb, yb)
        a2 = np.zeros_like(b2 if b2 is not None else a1[:, :0]) if a2 is None else a2
        b2 = np.zeros_like(a2) if b2 is None else b2
        gap = max(gap, float(np.max(np.abs(a1 - b1), initial=0.0)), float(np.max(np.abs(a2 - b2), initial=0.0)))
        sup_u2 = max(sup_u2, float(np.max(np.abs(b2), initial=0.0)))
    return gap, sup_u2


def write_convergence_csv(path: str | Path, rows, header: str = "") -> Path:
    """Rows of ``(epsilon, metric, value, stderr)``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_COLUMNS)
        for eps, metric, value, err in rows:
            w.writerow([fmt(float(eps)), metric, fmt(float(value)), fmt(float(err))])
    return path
