import math
import re
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chartflow.cli import (EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, RunConfig, cmd_convergence,
                           cmd_run, cmd_validate, convergence_study, main, parse_config,
                           read_monitors, serialize_config, write_monitors)
from chartflow.errors import ConfigError
from chartflow.grid import load_field
from chartflow.scheme import MONITOR_COLUMNS, MonitorRecord

HEADER = ",".join(MONITOR_COLUMNS)
VALUE_COLUMNS = MONITOR_COLUMNS[5:]


def small(**changes):
    base = dict(charts_per_axis=1, resolution=16, steps_L=2, dump_every=0)
    base.update(changes)
    return RunConfig().set(**base).validate()


# -- configuration documents -----------------------------------------------

def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert (cfg.n, cfg.charts_per_axis, cfg.resolution) == (2, 2, 32)
    assert cfg.big_c == 20.0 and cfg.rho == pytest.approx(1 / 320)
    assert cfg.control_variant == "switched" and cfg.steps_L == 10
    assert cfg == RunConfig()


def test_comments_and_quotes():
    cfg = parse_config("# header\nrho = 0.001  # trailing\n\ncontrol_variant = 'simple'\n"
                       "synchronize = false\nsteps_L = 3\n")
    assert cfg.rho == 0.001 and cfg.control_variant == "simple"
    assert cfg.synchronize is False and cfg.steps_L == 3


@pytest.mark.parametrize("text, field, line", [
    ("rho = -0.1", "rho", 1),
    ("\nbig_c = 0.5", "big_c", 2),
    ("colour = blue", "colour", 1),
    ("rho = 0.1\nrho = 0.2", "rho", 2),
    ("steps_L = many", "steps_L", 1),
    ("resolution = 4", "resolution", 1),
    ("coefficients = hyperbolic", "coefficients", 1),
    ("rho =", "rho", 1),
])
def test_config_errors_carry_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == field and err.value.line == line
    assert field in str(err.value)


def test_malformed_line():
    with pytest.raises(ConfigError, match="line 2") as err:
        parse_config("rho = 0.01\njust words\n")
    assert err.value.line == 2


def test_config_from_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("resolution = 48\n")
    assert parse_config(path).resolution == 48
    assert parse_config(str(path)).resolution == 48


@given(rho=st.floats(1e-5, 0.1), big_c=st.floats(1.5, 100), steps=st.integers(0, 50),
       variant=st.sampled_from(["none", "simple", "switched"]), eps=st.floats(0, 0.4),
       sync=st.booleans(), initial=st.sampled_from(["taylor_green", "random_divfree", "zero"]))
def test_config_round_trip(rho, big_c, steps, variant, eps, sync, initial):
    cfg = RunConfig().set(rho=rho, big_c=big_c, steps_L=steps, control_variant=variant,
                          coefficients=f"conformal({eps!r})", synchronize=sync, initial=initial)
    assert parse_config(serialize_config(cfg)) == cfg


def test_run_config_reads_through_to_scheme():
    cfg = RunConfig()
    assert cfg.get("tol_m") == cfg.scheme.tol_m == cfg.tol_m
    assert "rho" in RunConfig.keys() and "resolution" in RunConfig.keys()
    with pytest.raises(AttributeError):
        cfg.no_such_key


# -- monitors --------------------------------------------------------------

def test_monitor_round_trip(tmp_path):
    recs = [MonitorRecord(l=1, m=2, p=3, chart=0, ratio_p=0.125),
            MonitorRecord(l=1, sup_v_r=1 / 3, prop_P=1.0)]
    path = tmp_path / "m.csv"
    write_monitors(recs, path)
    assert path.read_text().splitlines()[0] == HEADER
    back = read_monitors(path)
    assert [r.as_row()[:5] for r in back] == [r.as_row()[:5] for r in recs]
    assert back[1].sup_v_r == 1 / 3 and math.isnan(back[0].sup_v)
    path.write_text("l,m\n")
    with pytest.raises(ValueError):
        read_monitors(path)


# -- run -------------------------------------------------------------------

def test_zero_steps_writes_header_only(tmp_path, capsys):
    assert cmd_run(small(steps_L=0), tmp_path) == EXIT_OK
    assert (tmp_path / "monitors.csv").read_text() == HEADER + "\n"
    assert "OK steps=0" in capsys.readouterr().out


def test_zero_initial_data_gives_zero_monitors(tmp_path):
    cmd_run(small(initial="zero", monitor_verbosity=0), tmp_path)
    recs = read_monitors(tmp_path / "monitors.csv")
    assert [r.l for r in recs] == [1, 2]
    for r in recs:
        # prop_P is a flag, not a measured value: property P holds trivially for r = 0
        assert r.prop_P == 1.0
        vals = [getattr(r, c) for c in VALUE_COLUMNS if c != "prop_P"]
        assert all(v == 0.0 for v in vals if not math.isnan(v))


def test_run_writes_summary_monitors_and_dumps(tmp_path, capsys):
    cfg = small(dump_every=1)
    assert cmd_run(cfg, tmp_path) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert re.fullmatch(r"OK steps=2 max_sup_v_r=\S+ max_sup_r=\S+", line)
    recs = read_monitors(tmp_path / "monitors.csv")
    steps = [r for r in recs if r.m < 0]
    assert len(steps) == 2
    assert max(r.sup_div for r in steps) <= 10 * (1 / 16) ** 2
    for l in (0, 1, 2):
        d = tmp_path / "fields" / f"step_{l:04d}"
        v1, r1, vr1 = (load_field(d / f"{k}1_chart0.txt") for k in ("v", "r", "v_r"))
        assert np.array_equal(v1.values + r1.values, vr1.values)
        assert v1.tau == float(l) and (d / "p_chart0.txt").exists()


def test_monitor_verbosity_filters_rows(tmp_path):
    counts = {}
    for verb in (0, 1, 2):
        out = tmp_path / str(verb)
        cmd_run(small(monitor_verbosity=verb), out)
        recs = read_monitors(out / "monitors.csv")
        counts[verb] = len(recs)
        if verb == 0:
            assert all(r.m < 0 for r in recs)
        if verb == 1:
            assert all(r.p < 0 for r in recs) and any(r.m > 0 for r in recs)
    assert counts[0] < counts[1] < counts[2]


def test_runs_are_deterministic(tmp_path):
    cfg = RunConfig().set(steps_L=1, dump_every=0)
    cmd_run(cfg, tmp_path / "a")
    cmd_run(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "monitors.csv").read_bytes() == (tmp_path / "b" / "monitors.csv").read_bytes()


# -- validate --------------------------------------------------------------

def test_validate_default_passes(capsys):
    assert cmd_validate(RunConfig()) == EXIT_OK
    out = capsys.readouterr().out
    assert "all checks passed" in out and "FAIL" not in out


@pytest.mark.parametrize("changes, check", [
    (dict(overlap_fraction=0.01), "coverage"),
    (dict(coefficients="conformal(0.6)"), "ellipticity"),
])
def test_validate_reports_failures(changes, check, capsys):
    assert cmd_validate(RunConfig().set(**changes)) == EXIT_NUMERICAL
    out = capsys.readouterr().out
    assert re.search(rf"^{check}\s+FAIL", out, re.M)


# -- convergence -----------------------------------------------------------

def test_convergence_order_is_second(tmp_path):
    cfg = small(control_variant="none", steps_L=1)
    assert cmd_convergence(cfg, tmp_path, [16, 32]) == EXIT_OK
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0] == "level,h,err_sup,order"
    assert lines[1].endswith(",")
    order = float(lines[2].split(",")[3])
    assert 1.7 <= order <= 2.3


def test_convergence_degenerate_orders():
    cfg = small(control_variant="none", steps_L=1)
    rows = convergence_study(cfg, [16, 16])
    assert rows[0][2] == rows[1][2] and math.isnan(rows[1][3])
    zero = convergence_study(small(initial="zero", steps_L=1), [16, 32])
    assert all(r[2] == 0.0 and math.isnan(r[3]) for r in zero)
    with pytest.raises(ConfigError):
        convergence_study(cfg, [16])
    with pytest.raises(ConfigError):
        convergence_study(small(initial="random_divfree"), [16, 32])


# -- entry point -----------------------------------------------------------

def test_main_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("rho = -0.1\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "rho" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO
    boom = tmp_path / "boom.cfg"
    boom.write_text("charts_per_axis = 1\nresolution = 32\ncontrol_variant = none\n"
                    "rho = 5.0\namplitude = 20.0\nsteps_L = 1\ndump_every = 0\n")
    assert main(["run", "--config", str(boom), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert main(["convergence", "--levels", "a,b", "--out", str(tmp_path)]) == EXIT_CONFIG
    good = tmp_path / "good.cfg"
    good.write_text("charts_per_axis = 1\nresolution = 16\nsteps_L = 1\ndump_every = 0\n")
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "g")]) == EXIT_OK


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "chartflow", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "validate", "convergence"):
        assert cmd in out.stdout
