"""Importance sampling for slow-fast diffusions.

Controls are built from the averaged (epsilon -> 0) Feynman-Kac equation
and used to tilt Euler-Maruyama paths of the full two-scale system.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .averaging import AveragedModel, analytic_average_bistable, ergodic_averaged_model
from .control import ControlField, averaged_control, oracle_control, zero_control
from .estimator import EstimatorReport, estimate, sweep_epsilon
from .fkpde import PdeConfig, PdeConfig2D, ValueGrid, log_transform, solve_phi0, solve_phi_eps_2d
from .model import ModelParams, ModelSpec, build_bistable_model, constant_cost, zero_cost
from .simulate import RngStream, StepPolicy, em_step, run_trajectory, simulate_paths

__all__ = [
    "AveragedModel",
    "ControlField",
    "EstimatorReport",
    "ModelParams",
    "ModelSpec",
    "PdeConfig",
    "PdeConfig2D",
    "RngStream",
    "StepPolicy",
    "ValueGrid",
    "analytic_average_bistable",
    "averaged_control",
    "build_bistable_model",
    "constant_cost",
    "em_step",
    "ergodic_averaged_model",
    "estimate",
    "log_transform",
    "oracle_control",
    "run_trajectory",
    "simulate_paths",
    "solve_phi0",
    "solve_phi_eps_2d",
    "sweep_epsilon",
    "zero_control",
    "zero_cost",
]
