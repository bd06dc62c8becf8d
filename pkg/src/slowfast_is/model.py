"""Slow-fast SDE problem definitions and the bistable benchmark.

A problem is the two-scale system

    dx = f(x, y) ds + beta^{-1/2} alpha1(x) dw1
    dy = eps^{-1} g(x, y) ds + beta^{-1/2} eps^{-1/2} alpha2(x, y) dw2

together with a running cost ``h(x) >= 0``.  All coefficient callbacks are
vectorized over a leading batch axis:

    f(x, y)      x: (n, k), y: (n, l)  ->  (n, k)
    g(x, y)                            ->  (n, l)
    alpha1(x)    x: (n, k)             ->  broadcastable to (n, k, m1)
    alpha2(x, y)                       ->  broadcastable to (n, l, m2)
    h(x)         x: (n, k)             ->  (n,)

Callbacks are pure; a :class:`ModelSpec` may be shared between workers.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numba
import numpy as np

from .errors import DissipativityViolation, ModelError

Coefficient = Callable[..., np.ndarray]

# exp(-1/x) is below exp(-700) here; treat as an exact zero.
_ETA_CUTOFF = 1.0 / 700.0
_WAVENUMBER = 4.0 * math.pi / 5.0
MOLLIFIER_WIDTH = 0.02


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters and initial data of a slow-fast problem."""

    beta: float
    epsilon: float
    t0: float = 0.0
    T: float = 1.0
    x0: tuple[float, ...] = (-1.0,)
    y0: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        object.__setattr__(self, "y0", tuple(float(v) for v in np.atleast_1d(self.y0)))
        if not self.beta > 0:
            raise ModelError(f"beta must be positive, got {self.beta}")
        if not self.epsilon > 0:
            raise ModelError(f"epsilon must be positive, got {self.epsilon}")
        if not self.t0 < self.T:
            raise ModelError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if len(self.x0) < 1 or len(self.y0) < 1:
            raise ModelError("x0 and y0 need at least one component")

    @property
    def k(self) -> int:
        return len(self.x0)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.y0)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient callbacks of a slow-fast SDE plus its parameters.

    ``averaged_drift`` is an optional closed form of the averaged slow drift
    (a callable ``x (n, k) -> (n, k)``); it is used by the coupled-path
    diagnostics in :mod:`slowfast_is.validate`.
    """

    params: ModelParams
    f: Coefficient
    g: Coefficient
    alpha1: Coefficient
    alpha2: Coefficient
    h: Coefficient
    m1: int = 1
    m2: int = 1
    name: str = "custom"
    averaged_drift: Coefficient | None = field(default=None, compare=False)

    @property
    def k(self) -> int:
        return self.params.k

    @property
    def l(self) -> int:  # noqa: E743
        return self.params.l

    def with_params(self, **changes) -> "ModelSpec":
        return replace(self, params=replace(self.params, **changes))

    def with_cost(self, h: Coefficient) -> "ModelSpec":
        return replace(self, h=h)


# ----------------------------------------------------------------------------
# Bistable example: scalar kernels compiled to ufuncs


@numba.njit(cache=True, inline="always")
def _eta_pair(x):
    # (eta(x), eta'(x)); the exponent is clamped so that vectorized code
    # evaluating both branches never overflows
    xs = max(abs(x), _ETA_CUTOFF)
    e = math.exp(-1.0 / xs) if x > _ETA_CUTOFF else 0.0
    return e, e / (xs * xs)


@numba.vectorize(["float64(float64)"], cache=True)
def eta(x):
    """Smooth cutoff ``exp(-1/x)`` for ``x > 0`` and ``0`` otherwise."""
    return _eta_pair(x)[0]


@numba.vectorize(["float64(float64)"], cache=True)
def eta_prime(x):
    return _eta_pair(x)[1]


@numba.vectorize(["float64(float64)"], cache=True)
def bistable_v1(x):
    """Double-well potential with wells near -1 and +1 and a barrier at 0."""
    ep = _eta_pair(x)[0]
    em = _eta_pair(-x)[0]
    return (
        0.5 * (1.0 - ep - em) * math.cos(_WAVENUMBER * x)
        + 3.0 * ep * (x - 1.0) ** 2
        + 3.0 * em * (x + 1.0) ** 2
    )


@numba.vectorize(["float64(float64)"], cache=True)
def bistable_v1_prime(x):
    ep, dp = _eta_pair(x)
    # dm is eta'(-x); d/dx eta(-x) = -dm
    em, dm = _eta_pair(-x)
    kx = _WAVENUMBER * x
    return (
        0.5 * (dm - dp) * math.cos(kx)
        - 0.5 * (1.0 - ep - em) * _WAVENUMBER * math.sin(kx)
        + 3.0 * dp * (x - 1.0) ** 2
        + 6.0 * ep * (x - 1.0)
        - 3.0 * dm * (x + 1.0) ** 2
        + 6.0 * em * (x + 1.0)
    )


@numba.vectorize(["float64(float64, float64)"], cache=True)
def _bistable_cost(x, w):
    ea = _eta_pair((x + 2.0) / w)[0]
    eb = _eta_pair((4.0 - x) / w)[0]
    return ea * eb * (x - 1.0) ** 2 + 10.0 * (2.0 - ea - eb)


def bistable_h(x, w: float = MOLLIFIER_WIDTH):
    """Running cost: a parabola around x=1 inside [-2, 4], about 20 outside."""
    return _bistable_cost(np.asarray(x, dtype=float), w)


def bistable_v2(x, y):
    return 0.5 * (np.asarray(x) - np.asarray(y)) ** 2


def bistable_potential(x, y):
    return bistable_v1(np.asarray(x, dtype=float)) + bistable_v2(x, y)


# batched coefficient callbacks (module level so they pickle)

def _bistable_f(x, y):
    return -bistable_v1_prime(x) - (x - y)


def _bistable_g(x, y):
    return x - y


_UNIT = np.ones((1, 1, 1))
_UNIT.flags.writeable = False


def _unit_alpha(*args):
    return _UNIT


def _bistable_h(x, w=MOLLIFIER_WIDTH):
    return _bistable_cost(x[..., 0], w)


def _bistable_averaged_drift(x):
    return -bistable_v1_prime(x)


def _zero_cost(x):
    return np.zeros(np.shape(x)[:-1])


def _const_cost(x, c):
    return np.full(np.shape(x)[:-1], c)


def zero_cost() -> Coefficient:
    return _zero_cost


def constant_cost(c: float) -> Coefficient:
    """``h(x) = c``; returns a picklable callback."""
    if c < 0:
        raise ModelError(f"running cost must be nonnegative, got {c}")
    return functools.partial(_const_cost, c=float(c))


def build_bistable_model(params: ModelParams, w: float = MOLLIFIER_WIDTH) -> ModelSpec:
    """The two-dimensional double-well benchmark with ``V = V1(x) + (x-y)^2/2``.

    Unit noise coefficients; the ``beta^{-1/2}`` and ``eps^{-1/2}`` factors are
    applied by the integrator.
    """
    if params.k != 1 or params.l != 1:
        raise ModelError(f"bistable model needs k = l = 1, got k={params.k}, l={params.l}")
    h = _bistable_h if w == MOLLIFIER_WIDTH else functools.partial(_bistable_h, w=w)
    return ModelSpec(
        params=params,
        f=_bistable_f,
        g=_bistable_g,
        alpha1=_unit_alpha,
        alpha2=_unit_alpha,
        h=h,
        name="bistable",
        averaged_drift=_bistable_averaged_drift,
    )


def check_dissipativity(
    model: ModelSpec,
    n_probe: int = 2000,
    radius: float = 5.0,
    seed: int = 0,
) -> float:
    """Probe the fast-drift contraction condition and return a rate estimate.

    Evaluates ``-(<g(x,y1) - g(x,y2), y1 - y2> + 3/beta ||a2(x,y1) - a2(x,y2)||^2) / |y1 - y2|^2``
    at random points around the initial state and returns the minimum.  Raises
    :class:`DissipativityViolation` when the estimate is not positive.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(model.params.x0)
    y0 = np.asarray(model.params.y0)
    x = x0 + rng.uniform(-radius, radius, size=(n_probe, model.k))
    y1 = y0 + rng.uniform(-radius, radius, size=(n_probe, model.l))
    y2 = y0 + rng.uniform(-radius, radius, size=(n_probe, model.l))
    dy = y1 - y2
    inner = np.sum((model.g(x, y1) - model.g(x, y2)) * dy, axis=-1)
    da = np.broadcast_to(model.alpha2(x, y1), (n_probe, model.l, model.m2)) - np.broadcast_to(
        model.alpha2(x, y2), (n_probe, model.l, model.m2)
    )
    frob = np.sum(da**2, axis=(-2, -1))
    norm2 = np.sum(dy**2, axis=-1)
    keep = norm2 > 1e-12
    rate = -(inner[keep] + 3.0 / model.params.beta * frob[keep]) / norm2[keep]
    lam = float(np.min(rate))
    if not lam > 0:
        raise DissipativityViolation(
            f"fast subsystem is not contracting (rate estimate {lam:.3g} <= 0)"
        )
    return lam
