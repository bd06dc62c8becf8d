from __future__ import annotations

import numpy as np
import pytest

from slowfast_is import ModelParams, PdeConfig, analytic_average_bistable, build_bistable_model, solve_phi0


@pytest.fixture(scope="session")
def bistable():
    return build_bistable_model(ModelParams(beta=1.0, epsilon=0.1))


@pytest.fixture(scope="session")
def phi0_grid(bistable):
    cfg = PdeConfig()
    avg = analytic_average_bistable(bistable, cfg.nodes())
    return solve_phi0(avg, bistable.params, cfg)


@pytest.fixture(scope="session")
def coarse_grid(bistable):
    cfg = PdeConfig(n_x=400, m=100)
    avg = analytic_average_bistable(bistable, cfg.nodes())
    return solve_phi0(avg, bistable.params, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_BUNDLED_RUNS: dict = {}


@pytest.fixture(scope="session")
def bundled_run(tmp_path_factory):
    """Run a bundled config through the CLI once per (name, workers); returns the CSV path."""
    from slowfast_is.cli import main
    from slowfast_is.config import bundled_configs

    configs = {p.stem: p for p in bundled_configs()}
    out_dir = tmp_path_factory.mktemp("bundled")

    def run(name: str, workers: int = 1):
        key = (name, workers)
        if key not in _BUNDLED_RUNS:
            out = out_dir / f"{name}.w{workers}.csv"
            code = main(["run", str(configs[name]), "-o", str(out), "--workers", str(workers), "-q"])
            assert code == 0
            _BUNDLED_RUNS[key] = out
        return _BUNDLED_RUNS[key]

    return run


def read_report_rows(path):
    import csv

    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
