"""Averaged (limiting) coefficients of the slow dynamics.

For each frozen slow value ``x`` the fast subsystem

    dxi = eps^{-1} g(x, xi) ds + beta^{-1/2} eps^{-1/2} alpha2(x, xi) dw

is ergodic with invariant density ``rho_x``.  The averaged coefficients are

    f~(x) = E_rho[f(x, .)],   a~ a~^T = E_rho[alpha1 alpha1^T],   h~(x) = E_rho[h].

They are available in closed form for the bistable example and by time
integration of the fast subsystem otherwise.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._format import fmt
from .errors import EllipticityViolation, IntegrationDiverged, ModelError
from .model import ModelSpec
from .simulate import RngStream

PROVENANCES = ("analytic", "ergodic-average")


@dataclass(frozen=True)
class AveragedModel:
    """Averaged coefficients tabulated on 1D slow-variable nodes."""

    x: np.ndarray
    f_tilde: np.ndarray
    a_tilde: np.ndarray
    h_tilde: np.ndarray
    provenance: str = "analytic"
    f_stderr: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        n = len(self.x)
        for name in ("f_tilde", "a_tilde", "h_tilde"):
            if np.shape(getattr(self, name)) != (n,):
                raise ValueError(f"{name} must have one value per node")


@dataclass(frozen=True)
class FastEnsemble:
    """Post-burn-in samples of the fast subsystem at frozen slow value ``x``.

    ``samples`` has shape ``(n_chains, per_chain, l)``.
    """

    x: np.ndarray
    samples: np.ndarray
    burn_in: int
    thinning: int
    dt_fast: float

    @property
    def M(self) -> int:
        return self.samples.shape[0] * self.samples.shape[1]

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])


@dataclass(frozen=True)
class ErgodicAverage:
    f_bar: np.ndarray
    aa_bar: np.ndarray
    h_bar: float
    a_bar: np.ndarray
    f_stderr: np.ndarray
    ensemble: FastEnsemble


def _check_ellipticity(a: np.ndarray, floor: float):
    if np.any(~np.isfinite(a)) or np.any(a < floor) or np.any(a <= 0):
        raise EllipticityViolation(f"averaged diffusion {np.min(a):.3g} below the floor {floor:.3g}")


def analytic_average_bistable(model: ModelSpec, grid: np.ndarray, a_floor: float = 0.0) -> AveragedModel:
    """Closed-form averaging for the double-well example.

    The fast invariant density is Gaussian, centred at ``x``, so the coupling
    term ``-(x - y)`` averages out: ``f~ = -V1'``, ``a~ = 1`` and ``h~ = h``.
    """
    if model.name != "bistable" or model.averaged_drift is None:
        raise ModelError(f"closed-form averaging is only available for the bistable model, got {model.name!r}")
    x = np.asarray(grid, dtype=float)
    pts = x[:, None]
    f_tilde = np.asarray(model.averaged_drift(pts), dtype=float)[:, 0]
    a_tilde = np.ones_like(x)
    h_tilde = np.asarray(model.h(pts), dtype=float)
    _check_ellipticity(a_tilde, a_floor)
    return AveragedModel(x, f_tilde, a_tilde, h_tilde, "analytic")


def _frozen(x, n):
    return np.tile(np.atleast_1d(np.asarray(x, dtype=float)), (n, 1))


def _run_fast(model: ModelSpec, x, y, dt, n_steps, gen, record_every=0):
    """Euler-Maruyama on the fast subsystem with x frozen; optionally records y."""
    p = model.params
    n = y.shape[0]
    scale = math.sqrt(dt / (p.beta * p.epsilon))
    xs = _frozen(x, n)
    out = [] if record_every else None
    for i in range(n_steps):
        noise = gen.standard_normal((n, model.m2))
        a2 = model.alpha2(xs, y)
        y = y + model.g(xs, y) * (dt / p.epsilon) + scale * np.matmul(a2, noise[..., None])[..., 0]
        if record_every and (i + 1) % record_every == 0:
            out.append(y)
    if not np.all(np.isfinite(y)):
        raise IntegrationDiverged(n_steps * dt, "fast subsystem diverged")
    return y, (np.stack(out, axis=1) if record_every else None)


def _fit_decay(series: np.ndarray, dt: float) -> float | None:
    """Exponential decay time of a normalized curve sampled every ``dt``."""
    below = np.nonzero(series < 0.1)[0]
    if len(below) == 0:
        return None
    cut = below[0]
    if cut < 2:
        # decays within a couple of samples; one-point estimate
        c = max(series[1], 1e-12) if len(series) > 1 else 1e-12
        return dt / max(-math.log(c), 1e-12)
    lags = np.arange(cut) * dt
    vals = -np.log(np.clip(series[:cut], 1e-300, None))
    rate = float(np.dot(lags, vals) / np.dot(lags, lags))
    return 1.0 / rate if rate > 0 else None


def estimate_mixing_time(
    model: ModelSpec,
    x,
    n_paths: int = 128,
    seed: int = 0,
    max_doublings: int = 3,
) -> float:
    """Autocorrelation decay time of the fast subsystem at frozen ``x``.

    Fits an exponential to the ensemble autocorrelation of the first fast
    component.  When the fast noise is degenerate the autocorrelation is
    meaningless, and the decay rate of the distance between two synchronously
    coupled copies is used instead.  Returns the simulated window length (an
    upper bound) if no decay is detected.
    """
    p = model.params
    gen = RngStream(seed, 0).generator()
    dt = p.epsilon / 20.0
    window = 400
    y0 = np.tile(np.asarray(p.y0, dtype=float), (n_paths, 1))
    y, _ = _run_fast(model, x, y0, dt, 200, gen)
    for _ in range(max_doublings + 1):
        y, path = _run_fast(model, x, y, dt, window, gen, record_every=1)
        z = path[..., 0]
        spread = np.std(z)
        if spread < 1e-6 * (1.0 + np.abs(np.mean(z))):
            return _contraction_time(model, x, dt, window)
        z = z - z.mean()
        var = np.mean(z * z)
        max_lag = window // 2
        acf = np.array([np.mean(z[:, : window - k] * z[:, k:]) for k in range(max_lag)]) / var
        tau = _fit_decay(acf, dt)
        if tau is not None:
            return tau
        window *= 2
    return window * dt


def _contraction_time(model: ModelSpec, x, dt: float, n_steps: int) -> float:
    p = model.params
    y0 = np.asarray(p.y0, dtype=float)
    xs = _frozen(x, 2)
    y = np.stack([y0 + 1.0, y0 - 1.0])
    dist = [2.0 * math.sqrt(model.l)]
    for _ in range(n_steps):
        # identical noise on both copies cancels in the difference
        y = y + model.g(xs, y) * (dt / p.epsilon)
        dist.append(float(np.linalg.norm(y[0] - y[1])))
    series = np.array(dist) / dist[0]
    tau = _fit_decay(series, dt)
    return tau if tau is not None else n_steps * dt


def sample_fast_ensemble(
    model: ModelSpec,
    x,
    M: int,
    burn_in: int | None = None,
    dt_fast: float | None = None,
    thinning: int = 1,
    n_chains: int = 16,
    seed: int = 0,
    stream_id: int = 0,
) -> FastEnsemble:
    """Draw ``M`` post-burn-in fast states at frozen ``x`` from ``n_chains`` chains.

    ``M`` is rounded up to a multiple of the chain count.

    Defaults: ``dt_fast = tau/20`` and ``burn_in = 20 tau / dt_fast`` with
    ``tau`` from :func:`estimate_mixing_time`.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if dt_fast is None or burn_in is None:
        tau = estimate_mixing_time(model, x, seed=seed)
        dt_fast = tau / 20.0 if dt_fast is None else dt_fast
        burn_in = int(math.ceil(20.0 * tau / dt_fast)) if burn_in is None else burn_in
    n_chains = max(1, min(n_chains, M))
    per_chain = -(-M // n_chains)
    gen = RngStream(seed, stream_id).generator()
    y0 = np.tile(np.asarray(model.params.y0, dtype=float), (n_chains, 1))
    y, _ = _run_fast(model, x, y0, dt_fast, burn_in, gen)
    _, path = _run_fast(model, x, y, dt_fast, per_chain * thinning, gen, record_every=thinning)
    return FastEnsemble(np.atleast_1d(np.asarray(x, dtype=float)), path, burn_in, thinning, dt_fast)


def symmetric_sqrt(mat: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive definite matrix."""
    mat = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(mat)
    if np.any(w <= 0):
        raise EllipticityViolation(f"averaged alpha1 alpha1^T is not positive definite (eigenvalues {w})")
    return (v * np.sqrt(w)) @ v.T


def _batch_stderr(values: np.ndarray, n_batches: int = 10) -> np.ndarray:
    # values: (chains, T, k); batch means within each chain
    chains, length, k = values.shape
    nb = max(1, min(n_batches, length))
    size = length // nb
    means = values[:, : nb * size].reshape(chains, nb, size, k).mean(axis=2).reshape(-1, k)
    if len(means) < 2:
        return np.full(k, np.inf)
    return means.std(axis=0, ddof=1) / math.sqrt(len(means))


def ergodic_average(
    model: ModelSpec,
    x,
    M: int,
    burn_in: int | None = None,
    dt_fast: float | None = None,
    seed: int = 0,
    stream_id: int = 0,
    n_chains: int = 16,
) -> ErgodicAverage:
    """Time averages of ``f``, ``alpha1 alpha1^T`` and ``h`` over the fast subsystem."""
    ens = sample_fast_ensemble(
        model, x, M, burn_in=burn_in, dt_fast=dt_fast, n_chains=n_chains, seed=seed, stream_id=stream_id
    )
    xi = ens.flat()
    if not np.all(np.isfinite(xi)):
        raise IntegrationDiverged(float("nan"), "non-finite fast sample")
    xs = _frozen(x, len(xi))
    fv = np.asarray(model.f(xs, xi), dtype=float)
    f_bar = fv.mean(axis=0)
    a1 = np.broadcast_to(model.alpha1(xs), (len(xi), model.k, model.m1))
    aa_bar = np.einsum("nij,nkj->ik", a1, a1) / len(xi)
    h_bar = float(np.mean(model.h(xs)))
    a_bar = symmetric_sqrt(aa_bar)
    f_err = _batch_stderr(fv.reshape(ens.samples.shape[0], ens.samples.shape[1], -1))
    return ErgodicAverage(f_bar, aa_bar, h_bar, a_bar, f_err, ens)


def ergodic_averaged_model(
    model: ModelSpec,
    grid: np.ndarray,
    M: int = 20000,
    seed: int = 0,
    a_floor: float = 0.0,
    **kwargs,
) -> AveragedModel:
    """Tabulate ergodic averages on ``grid`` (k = 1); node ``i`` uses stream ``i``."""
    if model.k != 1:
        raise ModelError("tabulated averaging needs a scalar slow variable")
    x = np.asarray(grid, dtype=float)
    f = np.empty_like(x)
    a = np.empty_like(x)
    h = np.empty_like(x)
    err = np.empty_like(x)
    for i, xi in enumerate(x):
        avg = ergodic_average(model, [xi], M, seed=seed, stream_id=i, **kwargs)
        f[i] = avg.f_bar[0]
        a[i] = avg.a_bar[0, 0]
        h[i] = avg.h_bar
        err[i] = avg.f_stderr[0]
    _check_ellipticity(a, a_floor)
    return AveragedModel(x, f, a, h, "ergodic-average", err)


def write_averaged_csv(avg: AveragedModel, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "fTilde", "aTilde", "hTilde"])
        for row in zip(avg.x, avg.f_tilde, avg.a_tilde, avg.h_tilde):
            w.writerow([fmt(v) for v in row])
    return path


def read_averaged_csv(path: str | Path, provenance: str = "analytic") -> AveragedModel:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["x", "fTilde", "aTilde", "hTilde"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return AveragedModel(data[:, 0], data[:, 1], data[:, 2], data[:, 3], provenance)


def _decoupled_drift(x, y, drift):
    return drift(x)


def _tabulated(x, grid, values):
    return np.interp(x[..., 0], grid, values)[..., None]


def _tabulated_alpha(x, grid, values):
    return np.interp(x[..., 0], grid, values)[..., None, None]


def _tabulated_cost(x, grid, values):
    return np.interp(x[..., 0], grid, values)


def averaged_dynamics(model: ModelSpec, avg: AveragedModel | None = None) -> ModelSpec:
    """The limiting slow dynamics written as a slow-fast model whose slow drift ignores ``y``.

    Without ``avg`` the closed-form averaged drift of ``model`` is used, with
    ``alpha1`` and ``h`` unchanged.  With ``avg`` (scalar slow variable) the
    tabulated coefficients are interpolated linearly.  The fast variable is
    still integrated but no longer feeds back, so the slow path is a sample
    of the averaged equation.
    """
    if avg is None:
        if model.averaged_drift is None:
            raise ModelError("model has no closed-form averaged drift; pass an AveragedModel")
        return replace(
            model,
            f=functools.partial(_decoupled_drift, drift=model.averaged_drift),
            name=f"{model.name}-averaged",
        )
    if model.k != 1 or model.m1 != 1:
        raise ModelError("tabulated averaged dynamics need a scalar slow variable and noise")
    drift = functools.partial(_tabulated, grid=avg.x, values=avg.f_tilde)
    return replace(
        model,
        f=functools.partial(_decoupled_drift, drift=drift),
        alpha1=functools.partial(_tabulated_alpha, grid=avg.x, values=avg.a_tilde),
        h=functools.partial(_tabulated_cost, grid=avg.x, values=avg.h_tilde),
        averaged_drift=drift,
        name=f"{model.name}-averaged",
    )
