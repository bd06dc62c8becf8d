"""Command-line front end.

    slowfast-is run CONFIG        estimator report(s) for one epsilon
    slowfast-is sweep CONFIG      one report per epsilon of the sweep list
    slowfast-is surface CONFIG    averaged control force on an (s, x) lattice
    slowfast-is validate CONFIG   strong-error and martingale checks per epsilon
    slowfast-is solve CONFIG      phi0 only, written as value-grid CSV files

Exit codes: 0 success, 2 unreadable or malformed config, 3 invalid values,
4 numerical failure (divergence, positivity loss).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .averaging import analytic_average_bistable
from .config import ConfigError, ConfigSyntaxError, ExperimentConfig, load_config
from .control import averaged_control, control_surface, write_surface_csv
from .errors import (
    EllipticityViolation,
    IllPosedConfig,
    IntegrationDiverged,
    ModelError,
    PositivityViolation,
    TooManyFailures,
)
from .estimator import REPORT_COLUMNS, EstimatorReport, estimate
from .fkpde import ValueGrid, interpolate_phi, solve_phi0, write_value_grid
from .validate import martingale_check, strong_error_4th, write_convergence_csv

logger = logging.getLogger("slowfast_is")

EXIT_OK, EXIT_PARSE, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3, 4
VERSION_STRING = f"slowfast_is {__version__}"


def csv_header(cfg: ExperimentConfig, command: str) -> str:
    """Comment block with the version and the resolved config (output location excluded)."""
    lines = [VERSION_STRING, f"command: {command}"]
    body = cfg.to_ini().split("[output]")[0].rstrip("\n")
    lines += body.splitlines()
    return "".join(f"# {ln}".rstrip() + "\n" for ln in lines)


def config_text_from_csv(path: str | Path) -> str:
    """Recover the config text recorded in a CSV header."""
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            text = line[1:].strip()
            if text.startswith("slowfast_is ") or text.startswith("command:"):
                continue
            out.append(text)
    return "\n".join(out) + "\n"


def _solve(cfg: ExperimentConfig) -> ValueGrid:
    model = cfg.build_model()
    pde = cfg.pde_config()
    avg = analytic_average_bistable(model, pde.nodes())
    return solve_phi0(avg, model.params, pde)


def _reports(cfg: ExperimentConfig, epsilons, workers) -> list[EstimatorReport]:
    mode = cfg.run.mode
    grid = _solve(cfg) if mode != "standard-mc" else None  # phi0 does not depend on epsilon
    out = []
    for eps in epsilons:
        model = cfg.build_model(eps)
        kinds = ["standard-mc", "importance-sampling"] if mode == "both" else [mode]
        for kind in kinds:
            control = None if kind == "standard-mc" else averaged_control(grid, model, u_cap=cfg.run.u_cap)
            rep = estimate(
                model,
                control,
                cfg.step_policy(),
                cfg.run.n,
                cfg.run.seed,
                threshold=cfg.run.threshold,
                workers=workers,
                batch_size=cfg.run.batch_size,
            )
            logger.info(
                "%s eps=%s I_N=%.4g reU=%.3g R_c=%.3g (%.1fs)",
                kind, eps, rep.I_N, rep.re_u, rep.crossing_ratio, rep.wall_clock,
            )
            out.append(rep)
    return out


def _write_reports(path: Path, header: str, reports, timing: bool) -> None:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        w.writerow(rep.row(wall_clock=timing))
    path.write_text(buf.getvalue())


def _output(cfg: ExperimentConfig, args) -> Path:
    path = Path(args.output or cfg.output.path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(cfg: ExperimentConfig, args) -> Path:
    path = _output(cfg, args)
    reports = _reports(cfg, [cfg.model.epsilon], args.workers)
    _write_reports(path, csv_header(cfg, "run"), reports, args.timing)
    return path


def cmd_sweep(cfg: ExperimentConfig, args) -> Path:
    eps = cfg.sweep.epsilons if args.eps is None else tuple(args.eps)
    if not eps:
        raise ConfigError("empty epsilon list", "--eps")
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigError(f"epsilons must be positive and strictly decreasing, got {list(eps)}", "--eps")
    cfg = replace(cfg, sweep=replace(cfg.sweep, epsilons=tuple(float(e) for e in eps)))
    path = _output(cfg, args)
    reports = _reports(cfg, cfg.sweep.epsilons, args.workers)
    _write_reports(path, csv_header(cfg, "sweep"), reports, args.timing)
    return path


def cmd_surface(cfg: ExperimentConfig, args) -> Path:
    path = _output(cfg, args)
    grid = _solve(cfg)
    model = cfg.build_model()
    field = averaged_control(grid, model, u_cap=cfg.run.u_cap)
    sc = cfg.surface
    s_nodes = np.linspace(cfg.model.t0, cfg.model.T, sc.n_s)
    x_nodes = np.linspace(sc.x_lo, sc.x_hi, sc.n_x)
    surface = control_surface(field, s_nodes, x_nodes, sc.y)
    write_surface_csv(path, s_nodes, x_nodes, surface, csv_header(cfg, "surface"))
    return path


def cmd_validate(cfg: ExperimentConfig, args) -> Path:
    path = _output(cfg, args)
    grid = _solve(cfg)
    rows = []
    for eps in cfg.validate.epsilons:
        model = cfg.build_model(eps)
        se = strong_error_4th(model, eps, cfg.validate.n_pairs, cfg.run.seed, cfg.step_policy(), workers=args.workers)
        rows.append((eps, "strong_error_4th", se.value, se.stderr))
        mart = martingale_check(
            model, averaged_control(grid, model, u_cap=cfg.run.u_cap), cfg.validate.n_pairs, cfg.run.seed,
            cfg.step_policy(), workers=args.workers, batch_size=cfg.run.batch_size,
        )
        rows.append((eps, "martingale_mean", mart.mean, mart.std_err))
        logger.info("eps=%s strong error %.4g +- %.2g, E[1/Z] = %.5f +- %.2g",
                    eps, se.value, se.stderr, mart.mean, mart.std_err)
    write_convergence_csv(path, rows, csv_header(cfg, "validate"))
    return path


def cmd_solve(cfg: ExperimentConfig, args) -> Path:
    path = _output(cfg, args)
    grid = _solve(cfg)
    stem = path.with_suffix("") if path.suffix == ".csv" else path
    write_value_grid(grid, stem)
    phi = interpolate_phi(grid, cfg.model.t0, cfg.model.x0[0])
    logger.info("phi0(t0, x0) = %.17g, U0 = %.17g", phi, -math.log(phi) / cfg.model.beta)
    return stem


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "surface": cmd_surface,
    "validate": cmd_validate,
    "solve": cmd_solve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slowfast-is", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="experiment config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("-o", "--output", help="output path (default: [output] path)")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $SLOWFAST_IS_WORKERS or 1)")
        p.add_argument("--timing", action="store_true", help="fill the wallClock column")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "sweep":
            p.add_argument("--eps", type=float, nargs="*", default=None, help="epsilon list (overrides [sweep])")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        out = COMMANDS[args.command](cfg, args)
    except ConfigSyntaxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, ModelError, IllPosedConfig, EllipticityViolation, ValueError) as exc:
        where = "" if isinstance(exc, ConfigError) else f"{args.config}: "
        print(f"error: {where}{exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IntegrationDiverged, TooManyFailures, PositivityViolation) as exc:
        print(f"error: {args.config}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    logger.info("wrote %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
