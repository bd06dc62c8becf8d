"""Backward Feynman-Kac solves for the averaged and the full slow-fast problem.

Time is discretized with Rothe's method (backward Euler, running cost on the
right-hand side):

    (1/dt - L) phi^j = (1/dt - beta h) phi^{j+1},   phi^m = 1.

Space uses exponentially fitted (Scharfetter-Gummel) finite-volume fluxes.
The discrete generator is then a Markov-chain rate matrix: every
off-diagonal rate is positive and rows sum to zero, so ``1/dt - L`` is an
M-matrix and the scheme inherits positivity and the maximum principle.  For
gradient drifts the rates satisfy detailed balance with respect to the
discrete Boltzmann density exactly.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from ._format import fmt
from .averaging import AveragedModel
from .errors import IllPosedConfig, ModelError, PositivityViolation
from .model import ModelParams, ModelSpec

logger = logging.getLogger(__name__)

BOUNDARY_RULES = ("no-flux", "dirichlet-one")


@dataclass(frozen=True)
class PdeConfig:
    n_x: int = 2000
    m: int = 1000
    x_lo: float = -4.0
    x_hi: float = 6.0
    bc: str = "no-flux"

    def __post_init__(self):
        if self.n_x < 3:
            raise IllPosedConfig(f"n_x must be at least 3, got {self.n_x}")
        if self.m < 1:
            raise IllPosedConfig(f"m must be at least 1, got {self.m}")
        if not self.x_lo < self.x_hi:
            raise IllPosedConfig(f"need x_lo < x_hi, got [{self.x_lo}, {self.x_hi}]")
        if self.bc not in BOUNDARY_RULES:
            raise IllPosedConfig(f"bc must be one of {BOUNDARY_RULES}, got {self.bc!r}")

    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.n_x)


@dataclass(frozen=True)
class PdeConfig2D:
    n_x: int = 121
    n_y: int = 181
    m: int = 400
    x_lo: float = -3.0
    x_hi: float = 3.0
    y_lo: float = -4.5
    y_hi: float = 4.5
    store_every: int = 4

    def __post_init__(self):
        if self.n_x < 3 or self.n_y < 3:
            raise IllPosedConfig("need at least 3 nodes per direction")
        if self.m < 1 or self.store_every < 1 or self.m % self.store_every:
            raise IllPosedConfig("m must be a positive multiple of store_every")
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise IllPosedConfig("empty domain")


@dataclass(frozen=True)
class ValueGrid:
    """phi and d(phi)/dx on a (time x space) lattice; row j is time ``times[j]``."""

    times: np.ndarray
    x: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    beta: float
    bc: str = "no-flux"

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])


@dataclass(frozen=True)
class ValueGrid2D:
    """phi and its gradient on a (stored time x slow x fast) lattice."""

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    dphi_x: np.ndarray
    dphi_y: np.ndarray
    beta: float
    epsilon: float
    max_peclet: float


@dataclass(frozen=True)
class ValueFunctionGrid:
    """U = -beta^{-1} ln(phi) and dU/dx on the lattice of a :class:`ValueGrid`."""

    times: np.ndarray
    x: np.ndarray
    U: np.ndarray
    dU: np.ndarray


def bernoulli(z):
    """``B(z) = z / (exp(z) - 1)`` with ``B(0) = 1``; positive for all real z."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-10
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.where(small, 1.0 - 0.5 * z, z / np.expm1(np.where(small, 1.0, z)))
    # z / inf underflows to 0 for very large z, which is the correct limit
    return np.where(np.isnan(out), 0.0, out)


def fitted_rates(x: np.ndarray, drift: np.ndarray, diffusion: np.ndarray, axis: int = -1):
    """Exponentially fitted jump rates of ``b d/dx + D d^2/dx^2`` on nodes ``x``.

    ``drift`` and ``diffusion`` hold nodal values along ``axis``.  Returns
    ``(up, down)`` with ``up[i]`` the rate i -> i+1 and ``down[i]`` the rate
    i -> i-1 (zero through the outer boundaries).  Boundary nodes own half
    cells, so their one-sided rates are doubled.
    """
    drift, diffusion = np.broadcast_arrays(np.asarray(drift, dtype=float), np.asarray(diffusion, dtype=float))
    drift = np.moveaxis(drift, axis, -1)
    diffusion = np.moveaxis(diffusion, axis, -1)
    dx = np.diff(x)
    b_face = 0.5 * (drift[..., 1:] + drift[..., :-1])
    d_face = 0.5 * (diffusion[..., 1:] + diffusion[..., :-1])
    if np.any(d_face <= 0):
        raise IllPosedConfig("diffusion coefficient must be positive on every face")
    pe = b_face * dx / d_face
    width = np.empty(len(x))
    width[1:-1] = 0.5 * (dx[1:] + dx[:-1])
    width[0] = 0.5 * dx[0]
    width[-1] = 0.5 * dx[-1]
    flux = d_face / dx
    up = np.zeros(drift.shape)
    down = np.zeros(drift.shape)
    up[..., :-1] = flux * bernoulli(-pe) / width[:-1]
    down[..., 1:] = flux * bernoulli(pe) / width[1:]
    return np.moveaxis(up, -1, axis), np.moveaxis(down, -1, axis), float(np.max(np.abs(pe), initial=0.0))


def _derivative(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order differences on a uniform axis (one-sided at the ends).

    The stencil weights are small integers, so constants give exactly 0.
    """
    a = np.moveaxis(a, axis, 0)
    d = np.empty_like(a)
    d[1:-1] = (a[2:] - a[:-2]) / (2 * h)
    d[0] = (-3 * a[0] + 4 * a[1] - a[2]) / (2 * h)
    d[-1] = (3 * a[-1] - 4 * a[-2] + a[-3]) / (2 * h)
    return np.moveaxis(d, 0, axis)


def _nodal_coefficients(avg: AveragedModel, nodes: np.ndarray):
    if avg.x.shape == nodes.shape and np.allclose(avg.x, nodes, rtol=0, atol=1e-12 * (1 + np.abs(nodes).max())):
        return avg.f_tilde, avg.a_tilde, avg.h_tilde
    span = 1e-9 * (nodes[-1] - nodes[0])
    if avg.x[0] > nodes[0] + span or avg.x[-1] < nodes[-1] - span:
        raise IllPosedConfig(
            f"averaged coefficients cover [{avg.x[0]}, {avg.x[-1]}], PDE domain is [{nodes[0]}, {nodes[-1]}]"
        )
    return (
        np.interp(nodes, avg.x, avg.f_tilde),
        np.interp(nodes, avg.x, avg.a_tilde),
        np.interp(nodes, avg.x, avg.h_tilde),
    )


def solve_phi0(avg: AveragedModel, params: ModelParams, cfg: PdeConfig) -> ValueGrid:
    """Solve the averaged backward equation for phi0 on ``[t0, T] x [x_lo, x_hi]``.

    Each backward step is one tridiagonal solve.  ``dphi`` holds second-order
    finite differences (one-sided at the boundary nodes).

    Raises
    ------
    IllPosedConfig
        If a step matrix is singular or the coefficients do not cover the grid.
    PositivityViolation
        If phi0 is not strictly positive somewhere (grid or time step too coarse).
    """
    beta = params.beta
    x = cfg.nodes()
    f, a, h = _nodal_coefficients(avg, x)
    if np.any(a <= 0):
        raise IllPosedConfig("averaged diffusion must be positive")
    up, down, pe = fitted_rates(x, f, a**2 / (2.0 * beta))
    dt = (params.T - params.t0) / cfg.m
    n = cfg.n_x
    ab = np.zeros((3, n))
    ab[0, 1:] = -up[:-1]
    ab[1] = 1.0 / dt + up + down
    ab[2, :-1] = -down[1:]
    dirichlet = cfg.bc == "dirichlet-one"
    bh = beta * h

    # Increment form: (1/dt - L) d = L phi^{j+1} - beta h phi^{j+1}, phi^j = phi^{j+1} + d.
    # Same scheme, but a constant phi with h = 0 stays exactly constant.
    phi = np.empty((cfg.m + 1, n))
    phi[-1] = 1.0
    for j in range(cfg.m - 1, -1, -1):
        nxt = phi[j + 1]
        jump = np.diff(nxt)
        rhs = -bh * nxt
        rhs[:-1] += up[:-1] * jump
        rhs[1:] -= down[1:] * jump
        try:
            if dirichlet:
                # boundary increments are zero; solve for the interior only
                phi[j] = nxt
                phi[j, 1:-1] += scipy.linalg.solve_banded((1, 1), ab[:, 1:-1], rhs[1:-1], check_finite=False)
            else:
                phi[j] = nxt + scipy.linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise IllPosedConfig(f"singular step matrix at time step {j}: {exc}") from exc
        if not np.all(np.isfinite(phi[j])):
            raise IllPosedConfig(f"non-finite solution at time step {j}")
        if np.any(phi[j] <= 0):
            raise PositivityViolation(
                f"phi0 <= 0 at time step {j}; reduce the time step (beta*max(h)*dt = {beta * h.max() * dt:.3g})"
            )
    if np.min(h) >= 0 and phi.max() > 1.0 + 1e-12:
        raise IllPosedConfig(f"discrete maximum principle violated (max phi = {phi.max():.17g})")
    times = params.t0 + dt * np.arange(cfg.m + 1)
    times[-1] = params.T
    dphi = _derivative(phi, (cfg.x_hi - cfg.x_lo) / (n - 1), axis=1)
    logger.debug("solved phi0 on %d nodes x %d steps, max cell Peclet %.3g", n, cfg.m, pe)
    return ValueGrid(times, x, phi, dphi, beta, cfg.bc)


def log_transform(grid: ValueGrid, beta: float | None = None) -> ValueFunctionGrid:
    """Value function ``U = -ln(phi)/beta`` and ``dU/dx = -dphi/(beta phi)``."""
    beta = grid.beta if beta is None else beta
    if np.any(grid.phi <= 0):
        raise ValueError("log transform needs a strictly positive phi")
    return ValueFunctionGrid(grid.times, grid.x, -np.log(grid.phi) / beta, -grid.dphi / (beta * grid.phi))


def _cost_1d(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    return np.asarray(model.h(x[:, None]), dtype=float)


def solve_phi_eps_2d(model: ModelSpec, cfg: PdeConfig2D) -> ValueGrid2D:
    """Backward solve of the full slow-fast equation with generator ``L1 + L0/eps``.

    Only for k = l = 1 and moderate epsilon; the fast drift ``g/eps`` must be
    resolved by the y grid.  One sparse LU factorization is reused for all
    time steps.  Warns when the largest cell Peclet number exceeds 2.
    """
    p = model.params
    if model.k != 1 or model.l != 1:
        raise ModelError("the 2D oracle needs k = l = 1")
    beta, eps = p.beta, p.epsilon
    x = np.linspace(cfg.x_lo, cfg.x_hi, cfg.n_x)
    y = np.linspace(cfg.y_lo, cfg.y_hi, cfg.n_y)
    X, Y = np.meshgrid(x, y, indexing="ij")
    xs = X.reshape(-1, 1)
    ys = Y.reshape(-1, 1)
    nodes = cfg.n_x * cfg.n_y
    fx = model.f(xs, ys)[:, 0].reshape(X.shape)
    gy = model.g(xs, ys)[:, 0].reshape(X.shape) / eps
    a1 = np.broadcast_to(model.alpha1(xs), (nodes, 1, model.m1))
    a2 = np.broadcast_to(model.alpha2(xs, ys), (nodes, 1, model.m2))
    d1 = (np.sum(a1**2, axis=(1, 2)) / (2 * beta)).reshape(X.shape)
    d2 = (np.sum(a2**2, axis=(1, 2)) / (2 * beta * eps)).reshape(X.shape)
    h = np.asarray(model.h(xs), dtype=float).reshape(X.shape)

    ux, dx_, pe_x = fitted_rates(x, fx, d1, axis=0)
    uy, dy_, pe_y = fitted_rates(y, gy, d2, axis=1)
    max_pe = max(pe_x, pe_y)
    if max_pe > 2:
        warnings.warn(f"cell Peclet number {max_pe:.3g} exceeds 2; the 2D grid under-resolves the drift")

    idx = np.arange(nodes).reshape(X.shape)
    rows = [idx[:-1, :].ravel(), idx[1:, :].ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols = [idx[1:, :].ravel(), idx[:-1, :].ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals = [ux[:-1, :].ravel(), dx_[1:, :].ravel(), uy[:, :-1].ravel(), dy_[:, 1:].ravel()]
    gen = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nodes, nodes)
    ).tocsr()
    out_rate = (ux + dx_ + uy + dy_).ravel()
    dt = (p.T - p.t0) / cfg.m
    mat = (scipy.sparse.diags(1.0 / dt + out_rate) - gen).tocsc()
    try:
        lu = scipy.sparse.linalg.splu(mat)
    except RuntimeError as exc:
        raise IllPosedConfig(f"singular 2D step matrix: {exc}") from exc
    bh = beta * h

    n_store = cfg.m // cfg.store_every + 1
    stored = np.empty((n_store, cfg.n_x, cfg.n_y))
    phi = np.ones(X.shape)
    stored[-1] = 1.0
    for j in range(cfg.m - 1, -1, -1):
        # increment form, as in the 1D solver: L phi from differences, so constants are exact
        jx = np.diff(phi, axis=0)
        jy = np.diff(phi, axis=1)
        rhs = -bh * phi
        rhs[:-1, :] += ux[:-1, :] * jx
        rhs[1:, :] -= dx_[1:, :] * jx
        rhs[:, :-1] += uy[:, :-1] * jy
        rhs[:, 1:] -= dy_[:, 1:] * jy
        phi = phi + lu.solve(rhs.ravel()).reshape(X.shape)
        if not np.all(np.isfinite(phi)):
            raise IllPosedConfig(f"non-finite 2D solution at time step {j}")
        if np.any(phi <= 0):
            raise PositivityViolation(f"phi_eps <= 0 at time step {j}")
        if j % cfg.store_every == 0:
            stored[j // cfg.store_every] = phi
    times = p.t0 + dt * cfg.store_every * np.arange(n_store)
    times[-1] = p.T
    dphi_x = _derivative(stored, (cfg.x_hi - cfg.x_lo) / (cfg.n_x - 1), axis=1)
    dphi_y = _derivative(stored, (cfg.y_hi - cfg.y_lo) / (cfg.n_y - 1), axis=2)
    return ValueGrid2D(times, x, y, stored, dphi_x, dphi_y, beta, eps, max_pe)


def interpolate_phi(grid: ValueGrid, s: float, x: float) -> float:
    """Bilinear value of phi at one point (clamped to the grid)."""
    j = np.clip(np.searchsorted(grid.times, s, side="right") - 1, 0, len(grid.times) - 2)
    w = (s - grid.times[j]) / (grid.times[j + 1] - grid.times[j])
    row = (1 - w) * grid.phi[j] + w * grid.phi[j + 1]
    return float(np.interp(x, grid.x, row))


# ----------------------------------------------------------------------------
# CSV serialization: <stem>.meta.csv, <stem>.phi.csv, <stem>.dphi.csv


def _grid_paths(stem: str | Path) -> tuple[Path, Path, Path]:
    stem = Path(stem)
    return (
        stem.with_name(stem.name + ".meta.csv"),
        stem.with_name(stem.name + ".phi.csv"),
        stem.with_name(stem.name + ".dphi.csv"),
    )


def write_value_grid(grid: ValueGrid, stem: str | Path) -> tuple[Path, Path, Path]:
    """Write a grid as three CSV files; matrices are (time x space), 17 significant digits."""
    meta_path, phi_path, dphi_path = _grid_paths(stem)
    with open(meta_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerow(["beta", fmt(grid.beta)])
        w.writerow(["bc", grid.bc])
        w.writerow(["n_times", len(grid.times)])
        w.writerow(["n_x", len(grid.x)])
        w.writerow(["times", " ".join(fmt(t) for t in grid.times)])
        w.writerow(["x", " ".join(fmt(v) for v in grid.x)])
    for path, mat in ((phi_path, grid.phi), (dphi_path, grid.dphi)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in mat:
                w.writerow([fmt(v) for v in row])
    return meta_path, phi_path, dphi_path


def read_value_grid(stem: str | Path) -> ValueGrid:
    meta_path, phi_path, dphi_path = _grid_paths(stem)
    with open(meta_path, newline="") as fh:
        meta = {row[0]: row[1] for row in csv.reader(fh)}
    times = np.array([float(v) for v in meta["times"].split()])
    x = np.array([float(v) for v in meta["x"].split()])
    phi = np.loadtxt(phi_path, delimiter=",", ndmin=2)
    dphi = np.loadtxt(dphi_path, delimiter=",", ndmin=2)
    if phi.shape != (len(times), len(x)) or dphi.shape != phi.shape:
        raise ValueError(f"grid files under {stem} have inconsistent shapes")
    return ValueGrid(times, x, phi, dphi, float(meta["beta"]), meta["bc"])
