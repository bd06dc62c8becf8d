from __future__ import annotations

import csv
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import read_report_rows
from slowfast_is.cli import VERSION_STRING, config_text_from_csv, main
from slowfast_is.config import (
    ConfigError,
    ConfigSyntaxError,
    ExperimentConfig,
    bundled_configs,
    from_text,
    load_config,
    with_epsilon,
)
from slowfast_is.estimator import REPORT_COLUMNS
from slowfast_is.fkpde import read_value_grid

SMOKE = next(p for p in bundled_configs() if p.stem == "smoke")
TINY = [
    "--set", "run.n=40", "--set", "run.batch_size=20", "--set", "pde.n_x=200", "--set", "pde.m=50",
    "--set", "policy.dt=0.01",
]


def test_bundled_configs_load():
    names = {p.stem for p in bundled_configs()}
    assert {"smoke", "table1_beta1_eps0.1", "table3_beta1_eps0.1"} <= names
    for p in bundled_configs():
        cfg = load_config(p)
        assert from_text(cfg.to_ini()) == cfg


def test_defaults_and_builders():
    cfg = from_text("")
    assert cfg == ExperimentConfig()
    assert cfg.params().epsilon == 0.1
    assert cfg.params(0.02).epsilon == 0.02
    assert cfg.step_policy().dt(0.1) == 1e-4
    assert cfg.pde_config().n_x == 2000
    assert with_epsilon(cfg, 0.5).model.epsilon == 0.5
    assert from_text("[model]\ncost = zero\n").build_model().h(np.ones((3, 1))).tolist() == [0, 0, 0]


@settings(max_examples=40, deadline=None)
@given(
    beta=st.floats(0.1, 20.0),
    eps=st.floats(1e-4, 1.0),
    n=st.integers(2, 10**6),
    seed=st.integers(0, 2**63),
    epsilons=st.lists(st.floats(1e-4, 1.0), min_size=1, max_size=4, unique=True),
    mode=st.sampled_from(["standard-mc", "importance-sampling", "both"]),
)
def test_round_trip(beta, eps, n, seed, epsilons, mode):
    cfg = ExperimentConfig()
    cfg = replace(
        cfg,
        model=replace(cfg.model, beta=beta, epsilon=eps),
        run=replace(cfg.run, n=n, seed=seed, mode=mode),
        sweep=replace(cfg.sweep, epsilons=tuple(sorted(epsilons, reverse=True))),
    )
    assert from_text(cfg.to_ini()) == cfg


def test_overrides():
    cfg = from_text("[run]\nn = 10\n", overrides=["run.n=20", "model.beta = 4", "sweep.epsilons=0.5 0.1"])
    assert cfg.run.n == 20 and cfg.model.beta == 4.0 and cfg.sweep.epsilons == (0.5, 0.1)
    with pytest.raises(ConfigSyntaxError):
        from_text("", overrides=["run.n"])
    # integers are parsed exactly, beyond float precision
    assert from_text("[run]\nseed = 9007199254740993\nn = 1e4\n").run.seed == 2**53 + 1
    with pytest.raises(ConfigError):
        from_text("[run]\nn = 1e30\n")


@pytest.mark.parametrize(
    "text,where",
    [
        ("[bogus]\nx = 1\n", "cfg:1"),
        ("[run]\nfoo = 1\n", "cfg:2"),
        ("[run]\n\nn = 1\n", "cfg:3"),
        ("[run]\nn = 2.5\n", "cfg:2"),
        ("[model]\nbeta = -1\n", "cfg:2"),
        ("[run]\nmode = fast\n", "cfg:2"),
        ("[sweep]\nepsilons = 0.1 0.2\n", "cfg:2"),
        ("[sweep]\nepsilons = 0.1 abc\n", "cfg:2"),
    ],
)
def test_invalid_values_point_at_line(text, where):
    with pytest.raises(ConfigError) as err:
        from_text(text, "cfg")
    assert err.value.where == where
    assert where in str(err.value)


@pytest.mark.parametrize(
    "text", ["n = 1\n", "[run]\nn = 1\nn = 2\n", "[run]\n[run]\n", "[run]\nthis line is junk\n"]
)
def test_syntax_errors(text):
    with pytest.raises(ConfigSyntaxError):
        from_text(text, "cfg")


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nn = 5\nnot a line\n")
    assert main(["run", str(bad), "-q"]) == 2
    assert "bad.cfg:3" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.cfg"), "-q"]) == 2
    assert main(["run", str(SMOKE), "--set", "run.n=1", "-q", "-o", str(tmp_path / "x.csv")]) == 3
    assert "--set run.n" in capsys.readouterr().err
    assert main(["sweep", str(SMOKE), "--eps", "-q", "-o", str(tmp_path / "x.csv")]) == 3
    assert main(["sweep", str(SMOKE), "--eps", "0.1", "0.2", "-q", "-o", str(tmp_path / "x.csv")]) == 3
    # a single explicit step with a huge cost loses positivity
    code = main(["solve", str(SMOKE), "--set", "pde.m=1", "--set", "model.cost=const",
                 "--set", "model.cost_value=5", "-q", "-o", str(tmp_path / "s.csv")])
    assert code == 4
    assert not (tmp_path / "x.csv").exists()


def test_version():
    out = subprocess.run([sys.executable, "-m", "slowfast_is.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == VERSION_STRING


def test_run_both_and_header(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", str(SMOKE), *TINY, "-o", str(out), "-q"]) == 0
    rows = read_report_rows(out)
    assert list(rows[0]) == list(REPORT_COLUMNS)
    assert len(rows) == 2
    mc, is_ = rows
    # standard Monte Carlo first, then importance sampling, same seed
    assert mc["nClamped"] == "0" and mc["seed"] == is_["seed"] == "7"
    assert float(is_["reU"]) < float(mc["reU"])
    assert mc["wallClock"] == "" and is_["wallClock"] == ""
    text = out.read_text()
    assert text.startswith(f"# {VERSION_STRING}\n# command: run\n")
    assert "[output]" not in text
    # the header reproduces the run
    cfg = tmp_path / "again.cfg"
    cfg.write_text(config_text_from_csv(out))
    again = tmp_path / "again.csv"
    assert main(["run", str(cfg), "-o", str(again), "-q"]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_timing_column(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["run", str(SMOKE), *TINY, "--set", "run.mode=standard-mc", "--timing", "-o", str(out), "-q"]) == 0
    (row,) = read_report_rows(out)
    assert float(row["wallClock"]) > 0


def test_single_epsilon_sweep_equals_run(tmp_path):
    a, b = tmp_path / "run.csv", tmp_path / "sweep.csv"
    assert main(["run", str(SMOKE), *TINY, "-o", str(a), "-q"]) == 0
    assert main(["sweep", str(SMOKE), *TINY, "--eps", "0.1", "-o", str(b), "-q"]) == 0
    assert read_report_rows(a) == read_report_rows(b)
    c = tmp_path / "two.csv"
    assert main(["sweep", str(SMOKE), *TINY, "-o", str(c), "-q"]) == 0
    rows = read_report_rows(c)
    assert [r["epsilon"] for r in rows] == ["0.1", "0.1", "0.05", "0.05"]


def test_surface(tmp_path):
    out = tmp_path / "u.csv"
    assert main(["surface", str(SMOKE), "-o", str(out), "-q"]) == 0
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines[1:]))
    assert lines[0] == "s,x,u1" and len(rows) == 11 * 41
    u = {(float(s), float(x)): float(v) for s, x, v in rows}
    assert u[(0.0, -0.5)] < 0
    zero = tmp_path / "z.csv"
    assert main(["surface", str(SMOKE), "--set", "model.cost=zero", "-o", str(zero), "-q"]) == 0
    assert all(r[2] == "0.0" for r in csv.reader(zero.read_text().splitlines()[-451:]))


def test_solve(tmp_path):
    assert main(["solve", str(SMOKE), "-o", str(tmp_path / "phi.csv"), "-q"]) == 0
    grid = read_value_grid(tmp_path / "phi")
    assert grid.phi.shape == (201, 500)
    assert np.all(grid.phi[-1] == 1.0)


def test_validate_command(tmp_path):
    out = tmp_path / "v.csv"
    args = ["validate", str(SMOKE), "--set", "validate.n_pairs=20", "--set", "pde.m=50", "-o", str(out), "-q"]
    assert main(args) == 0
    rows = [ln.split(",") for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert rows[0] == ["epsilon", "metric", "value", "stderr"]
    assert [(r[0], r[1]) for r in rows[1:]] == [
        ("0.1", "strong_error_4th"), ("0.1", "martingale_mean"),
        ("0.025", "strong_error_4th"), ("0.025", "martingale_mean"),
    ]
