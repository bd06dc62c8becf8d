"""Feedback control forces built from Feynman-Kac solutions.

The averaged-suboptimal control acts on the slow channel only,

    u1(s, x, y) = -beta^{-1} alpha1(x)^T dphi0/dx (s, x) / phi0(s, x),   u2 = 0,

while the full-oracle control uses the 2D solution phi_eps on both channels,

    u1 = -beta^{-1} alpha1^T d_x phi / phi,   u2 = -beta^{-1} eps^{-1/2} alpha2^T d_y phi / phi.

Evaluation interpolates phi and its gradient (bilinear in (s, x), trilinear
in (s, x, y)), divides with a positive floor, and clips every component to
``[-u_cap, u_cap]``.  Out-of-domain states are clamped to the boundary nodes.
Every evaluation that needed any clamping is counted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ._format import fmt
from .fkpde import ValueGrid, ValueGrid2D
from .model import ModelSpec, _unit_alpha

KINDS = ("averaged-suboptimal", "full-oracle", "zero")
DEFAULT_U_CAP = 50.0


def _locate(nodes: np.ndarray, q):
    """Cell index and weight of ``q`` on uniform ``nodes``; clamps outside points."""
    n = len(nodes)
    h = (nodes[-1] - nodes[0]) / (n - 1)
    pos = (np.asarray(q, dtype=float) - nodes[0]) / h
    outside = (pos < 0) | (pos > n - 1)
    pos = np.clip(pos, 0.0, n - 1)
    i = np.minimum(pos.astype(np.intp), n - 2)
    return i, pos - i, outside


def _time_weight(times: np.ndarray, s: float):
    j, w, _ = _locate(times, s)
    return int(j), float(w)


@dataclass(frozen=True)
class ControlField:
    """Immutable control force evaluator shared read-only by all paths."""

    kind: str
    beta: float
    grid: ValueGrid | ValueGrid2D | None = None
    phi_floor: float = 0.0
    u_cap: float = DEFAULT_U_CAP
    alpha1: Callable = _unit_alpha
    alpha2: Callable = _unit_alpha
    epsilon: float = 1.0
    m1: int = 1
    m2: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "averaged-suboptimal" and not isinstance(self.grid, ValueGrid):
            raise ValueError("averaged-suboptimal control needs a 1D ValueGrid")
        if self.kind == "full-oracle" and not isinstance(self.grid, ValueGrid2D):
            raise ValueError("full-oracle control needs a ValueGrid2D")
        if not self.u_cap > 0:
            raise ValueError("u_cap must be positive")

    def evaluate(self, s: float, x: np.ndarray, y: np.ndarray):
        """Batched evaluation: ``(u1 (n, m1), u2 (n, m2) or None, n_clamped)``."""
        n = x.shape[0]
        if self.kind == "zero":
            return np.zeros((n, self.m1)), None, 0
        if self.kind == "averaged-suboptimal":
            return self._averaged(s, x)
        return self._oracle(s, x, y)

    def _averaged(self, s, x):
        g = self.grid
        j, wt = _time_weight(g.times, s)
        phi_row = g.phi[j] + wt * (g.phi[j + 1] - g.phi[j])
        dphi_row = g.dphi[j] + wt * (g.dphi[j + 1] - g.dphi[j])
        i, wx, outside = _locate(g.x, x[:, 0])
        phi = phi_row[i] + wx * (phi_row[i + 1] - phi_row[i])
        dphi = dphi_row[i] + wx * (dphi_row[i + 1] - dphi_row[i])
        ratio = dphi / np.maximum(phi, self.phi_floor)
        a1 = np.broadcast_to(self.alpha1(x), (x.shape[0], 1, self.m1))[:, 0, :]
        u1 = (-1.0 / self.beta) * a1 * ratio[:, None]
        return self._clip(u1, None, outside)

    def _oracle(self, s, x, y):
        g = self.grid
        j, wt = _time_weight(g.times, s)
        i, wx, out_x = _locate(g.x, x[:, 0])
        k, wy, out_y = _locate(g.y, y[:, 0])

        def tri(arr):
            slab = arr[j] + wt * (arr[j + 1] - arr[j])
            c0 = slab[i, k] + wy * (slab[i, k + 1] - slab[i, k])
            c1 = slab[i + 1, k] + wy * (slab[i + 1, k + 1] - slab[i + 1, k])
            return c0 + wx * (c1 - c0)

        phi = np.maximum(tri(g.phi), self.phi_floor)
        n = x.shape[0]
        a1 = np.broadcast_to(self.alpha1(x), (n, 1, self.m1))[:, 0, :]
        a2 = np.broadcast_to(self.alpha2(x, y), (n, 1, self.m2))[:, 0, :]
        u1 = (-1.0 / self.beta) * a1 * (tri(g.dphi_x) / phi)[:, None]
        u2 = (-1.0 / self.beta) * self.epsilon**-0.5 * a2 * (tri(g.dphi_y) / phi)[:, None]
        return self._clip(u1, u2, out_x | out_y)

    def _clip(self, u1, u2, outside):
        hit = np.any(np.abs(u1) > self.u_cap, axis=-1)
        u1 = np.clip(u1, -self.u_cap, self.u_cap)
        if u2 is not None:
            hit |= np.any(np.abs(u2) > self.u_cap, axis=-1)
            u2 = np.clip(u2, -self.u_cap, self.u_cap)
        return u1, u2, int(np.count_nonzero(hit | outside))


def _default_floor(phi: np.ndarray) -> float:
    lo = float(np.min(phi))
    if not lo > 0:
        raise ValueError("phi must be strictly positive to build a control")
    return 1e-2 * lo


def averaged_control(
    grid: ValueGrid,
    model: ModelSpec,
    u_cap: float = DEFAULT_U_CAP,
    phi_floor: float | None = None,
    alpha1: Callable | None = None,
) -> ControlField:
    """Suboptimal control from the averaged solution phi0.

    ``alpha1`` overrides the slow noise coefficient used in the force, e.g.
    with the averaged diffusion; under a y-independent ``alpha1`` both agree.
    """
    if model.k != 1:
        raise ValueError("averaged control needs a scalar slow variable")
    return ControlField(
        "averaged-suboptimal",
        model.params.beta,
        grid,
        _default_floor(grid.phi) if phi_floor is None else phi_floor,
        u_cap,
        alpha1=model.alpha1 if alpha1 is None else alpha1,
        alpha2=model.alpha2,
        epsilon=model.params.epsilon,
        m1=model.m1,
        m2=model.m2,
    )


def oracle_control(
    grid: ValueGrid2D,
    model: ModelSpec,
    u_cap: float = DEFAULT_U_CAP,
    phi_floor: float | None = None,
) -> ControlField:
    """Near-optimal control of the full system from the 2D solution phi_eps."""
    return ControlField(
        "full-oracle",
        model.params.beta,
        grid,
        _default_floor(grid.phi) if phi_floor is None else phi_floor,
        u_cap,
        alpha1=model.alpha1,
        alpha2=model.alpha2,
        epsilon=model.params.epsilon,
        m1=model.m1,
        m2=model.m2,
    )


def zero_control(model: ModelSpec) -> ControlField:
    return ControlField("zero", model.params.beta, m1=model.m1, m2=model.m2, epsilon=model.params.epsilon)


def eval_control(field: ControlField, s: float, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Control at a single state ``(s, x, y)``; returns ``(u1, u2)`` with ``u2 = 0`` unless oracle."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    yb = np.atleast_2d(np.asarray(y, dtype=float))
    u1, u2, _ = field.evaluate(s, xb, yb)
    if u2 is None:
        u2 = np.zeros((1, field.m2))
    return u1[0], u2[0]


def eval_oracle_control(field: ControlField, s: float, x, y) -> tuple[np.ndarray, np.ndarray]:
    if field.kind != "full-oracle":
        raise ValueError("oracle evaluation needs a full-oracle control field")
    return eval_control(field, s, x, y)


def control_surface(field: ControlField, s_nodes, x_nodes, y: float = 0.0) -> np.ndarray:
    """First slow-channel component of the control on an (s, x) lattice."""
    x_nodes = np.asarray(x_nodes, dtype=float)
    xb = x_nodes[:, None]
    yb = np.full_like(xb, y)
    out = np.empty((len(s_nodes), len(x_nodes)))
    for r, s in enumerate(s_nodes):
        out[r] = field.evaluate(float(s), xb, yb)[0][:, 0]
    return out


def write_surface_csv(path: str | Path, s_nodes, x_nodes, surface: np.ndarray, header: str = "") -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "x", "u1"])
        for r, s in enumerate(s_nodes):
            for c, xv in enumerate(x_nodes):
                w.writerow([fmt(float(s)), fmt(float(xv)), fmt(float(surface[r, c]))])
    return path
