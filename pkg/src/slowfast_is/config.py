"""Experiment configuration: INI-style ``key = value`` files with sections.

Every key has a default; a file only needs the keys it changes.  Values can
be overridden from the command line with ``section.key=value``.  Parsing
keeps the line of every key so validation errors point at the file line.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ._format import fmt
from .control import DEFAULT_U_CAP
from .errors import SlowFastError
from .fkpde import BOUNDARY_RULES, PdeConfig
from .model import (
    MOLLIFIER_WIDTH,
    ModelParams,
    ModelSpec,
    build_bistable_model,
    constant_cost,
    zero_cost,
)
from .simulate import DT_RULES, StepPolicy

MODES = ("standard-mc", "importance-sampling", "both")
COSTS = ("bistable", "zero", "const")
MODELS = ("bistable",)


class ConfigSyntaxError(SlowFastError):
    """The file is not valid ``key = value`` text."""


class ConfigError(SlowFastError, ValueError):
    """A key is unknown or its value is invalid; ``where`` is ``file:line``."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


def _floats(text: str) -> tuple[float, ...]:
    parts = text.replace(",", " ").split()
    return tuple(float(p) for p in parts)


@dataclass(frozen=True)
class ModelSection:
    name: str = "bistable"
    beta: float = 1.0
    epsilon: float = 0.1
    t0: float = 0.0
    T: float = 1.0
    x0: tuple[float, ...] = (-1.0,)
    y0: tuple[float, ...] = (0.0,)
    cost: str = "bistable"
    cost_value: float = 0.0
    width: float = MOLLIFIER_WIDTH


@dataclass(frozen=True)
class PdeSection:
    n_x: int = 2000
    m: int = 1000
    x_lo: float = -4.0
    x_hi: float = 6.0
    bc: str = "no-flux"


@dataclass(frozen=True)
class PolicySection:
    dt: float = 1e-4
    dt_rule: str = "epsilon-scaled"
    eps_factor: float = 0.1


@dataclass(frozen=True)
class RunSection:
    n: int = 10000
    seed: int = 0
    mode: str = "importance-sampling"
    batch_size: int = 2500
    threshold: float = 0.0
    u_cap: float = DEFAULT_U_CAP


@dataclass(frozen=True)
class SweepSection:
    epsilons: tuple[float, ...] = (0.1, 0.03, 0.01)


@dataclass(frozen=True)
class SurfaceSection:
    n_s: int = 51
    n_x: int = 201
    x_lo: float = -2.5
    x_hi: float = 2.5
    y: float = 0.0


@dataclass(frozen=True)
class ValidateSection:
    epsilons: tuple[float, ...] = (0.1, 0.025)
    n_pairs: int = 2000


@dataclass(frozen=True)
class OutputSection:
    path: str = "results.csv"


SECTIONS = {
    "model": ModelSection,
    "pde": PdeSection,
    "policy": PolicySection,
    "run": RunSection,
    "sweep": SweepSection,
    "surface": SurfaceSection,
    "validate": ValidateSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    pde: PdeSection = field(default_factory=PdeSection)
    policy: PolicySection = field(default_factory=PolicySection)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    surface: SurfaceSection = field(default_factory=SurfaceSection)
    validate: ValidateSection = field(default_factory=ValidateSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- builders -----------------------------------------------------------

    def params(self, epsilon: float | None = None) -> ModelParams:
        m = self.model
        return ModelParams(m.beta, m.epsilon if epsilon is None else epsilon, m.t0, m.T, m.x0, m.y0)

    def build_model(self, epsilon: float | None = None) -> ModelSpec:
        m = self.model
        spec = build_bistable_model(self.params(epsilon), w=m.width)
        if m.cost == "zero":
            spec = spec.with_cost(zero_cost())
        elif m.cost == "const":
            spec = spec.with_cost(constant_cost(m.cost_value))
        return spec

    def pde_config(self) -> PdeConfig:
        p = self.pde
        return PdeConfig(p.n_x, p.m, p.x_lo, p.x_hi, p.bc)

    def step_policy(self) -> StepPolicy:
        p = self.policy
        return StepPolicy(p.dt, p.dt_rule, p.eps_factor)

    # -- text form ----------------------------------------------------------

    def to_ini(self) -> str:
        """Full resolved configuration; ``from_text(to_ini())`` returns an equal object."""
        out = io.StringIO()
        for name in SECTIONS:
            out.write(f"[{name}]\n")
            section = getattr(self, name)
            for f in fields(section):
                out.write(f"{f.name} = {_render(getattr(section, f.name))}\n")
            out.write("\n")
        return out.getvalue().rstrip("\n") + "\n"


def _render(value) -> str:
    if isinstance(value, tuple):
        return " ".join(fmt(v) for v in value)
    return fmt(value)


def _convert(kind, text: str):
    if kind is int or kind == "int":
        try:
            return int(text)
        except ValueError:
            pass
        # float notation such as 1e4 is accepted when it is an exact integer
        v = float(text)
        if not (math.isfinite(v) and v == int(v) and abs(v) < 2**53):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(v)
    if kind is float or kind == "float":
        return float(text)
    if kind in (tuple[float, ...], "tuple[float, ...]"):
        return _floats(text)
    return text.strip()


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif section is not None:
            for sep in ("=", ":"):
                if sep in line:
                    lines[(section, line.split(sep, 1)[0].strip().lower())] = no
                    break
    return lines


def from_text(text: str, source: str = "<config>", overrides=()) -> ExperimentConfig:
    """Parse config text, apply ``section.key=value`` overrides, then validate.

    Raises
    ------
    ConfigSyntaxError
        Malformed text (maps to exit code 2).
    ConfigError
        Unknown section or key, bad value or failed validation (exit code 3).
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigSyntaxError(f"{source}:{exc.lineno}: key outside of a [section]") from exc
    except configparser.ParsingError as exc:
        no = exc.errors[0][0] if exc.errors else 0
        raise ConfigSyntaxError(f"{source}:{no}: cannot parse line") from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigSyntaxError(f"{source}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigSyntaxError(f"{source}:{exc.lineno}: duplicate section [{exc.section}]") from exc
    except configparser.Error as exc:
        raise ConfigSyntaxError(f"{source}: {exc}") from exc

    lines = _key_lines(text)
    values: dict[str, dict[str, tuple[str, str]]] = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", f"{source}:{_section_line(text, sec)}")
        for key, val in parser.items(sec):
            values.setdefault(sec, {})[key] = (val, f"{source}:{lines.get((sec, key), 0)}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigSyntaxError(f"--set {item}: expected section.key=value")
        lhs, val = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", f"--set {lhs}")
        values.setdefault(sec, {})[key.strip().lower()] = (val.strip(), f"--set {lhs.strip()}")

    built = {}
    for sec, cls in SECTIONS.items():
        known = {f.name.lower(): f for f in fields(cls)}
        kwargs = {}
        for key, (val, where) in values.get(sec, {}).items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", where)
            f = known[key]
            try:
                kwargs[f.name] = _convert(f.type, val)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{f.name}: {exc}", where) from exc
        built[sec] = cls(**kwargs)
    cfg = ExperimentConfig(**built)
    validate_config(cfg, values)
    return cfg


def _section_line(text: str, name: str) -> int:
    for no, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() == f"[{name}]":
            return no
    return 0


def validate_config(cfg: ExperimentConfig, values=None) -> None:
    """Check value ranges; errors point at the offending key when it is known.

    ``values`` maps section -> key -> ``(text, where)`` as collected by the parser.
    """
    values = values or {}

    def where(sec, key):
        return values.get(sec, {}).get(key, (None, f"[{sec}] {key}"))[1]

    def need(ok, sec, key, message):
        if not ok:
            raise ConfigError(message, where(sec, key))

    m, r, p = cfg.model, cfg.run, cfg.policy
    need(m.name in MODELS, "model", "name", f"model must be one of {MODELS}")
    need(m.cost in COSTS, "model", "cost", f"cost must be one of {COSTS}")
    need(m.beta > 0, "model", "beta", "beta must be positive")
    need(m.epsilon > 0, "model", "epsilon", "epsilon must be positive")
    need(m.t0 < m.T, "model", "t", "need t0 < T")
    need(len(m.x0) == 1, "model", "x0", "the bistable model has one slow component")
    need(len(m.y0) == 1, "model", "y0", "the bistable model has one fast component")
    need(m.cost_value >= 0, "model", "cost_value", "running cost must be nonnegative")
    need(m.width > 0, "model", "width", "width must be positive")
    need(cfg.pde.n_x >= 3, "pde", "n_x", "n_x must be at least 3")
    need(cfg.pde.m >= 1, "pde", "m", "m must be at least 1")
    need(cfg.pde.x_lo < cfg.pde.x_hi, "pde", "x_hi", "need x_lo < x_hi")
    need(cfg.pde.bc in BOUNDARY_RULES, "pde", "bc", f"bc must be one of {BOUNDARY_RULES}")
    need(p.dt > 0, "policy", "dt", "dt must be positive")
    need(p.dt_rule in DT_RULES, "policy", "dt_rule", f"dt_rule must be one of {DT_RULES}")
    need(p.eps_factor > 0, "policy", "eps_factor", "eps_factor must be positive")
    need(r.n >= 2, "run", "n", f"need at least 2 trajectories, got n={r.n}")
    need(r.seed >= 0, "run", "seed", "seed must be nonnegative")
    need(r.mode in MODES, "run", "mode", f"mode must be one of {MODES}")
    need(r.batch_size >= 1, "run", "batch_size", "batch_size must be positive")
    need(r.u_cap > 0, "run", "u_cap", "u_cap must be positive")
    eps = cfg.sweep.epsilons
    need(len(eps) > 0, "sweep", "epsilons", "empty epsilon list")
    need(all(e > 0 for e in eps), "sweep", "epsilons", "epsilons must be positive")
    need(all(b < a for a, b in zip(eps, eps[1:])), "sweep", "epsilons", "epsilons must be strictly decreasing")
    s = cfg.surface
    need(s.n_s >= 2, "surface", "n_s", "n_s must be at least 2")
    need(s.n_x >= 2, "surface", "n_x", "n_x must be at least 2")
    need(s.x_lo < s.x_hi, "surface", "x_hi", "need x_lo < x_hi")
    v = cfg.validate
    need(len(v.epsilons) > 0 and all(e > 0 for e in v.epsilons), "validate", "epsilons", "need positive epsilons")
    need(v.n_pairs >= 2, "validate", "n_pairs", "n_pairs must be at least 2")


def load_config(path: str | Path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigSyntaxError(f"{path}: cannot read config ({exc.strerror})") from exc
    return from_text(text, str(path), overrides)


def with_epsilon(cfg: ExperimentConfig, epsilon: float) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, epsilon=float(epsilon)))


def bundled_configs() -> list[Path]:
    """Paths of the configuration files shipped with the package."""
    return sorted((Path(__file__).parent / "configs").glob("*.cfg"))
