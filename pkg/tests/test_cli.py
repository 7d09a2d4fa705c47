import json
import os

import numpy as np
import pytest

from semiqp.cli import (load_config, main, period_estimate, run_scenario,
                        _parse_float)
from semiqp.errors import ConfigError, InsufficientOscillations

PI = np.pi


def write_cfg(tmp_path, text, name="scn.cfg"):
    path = os.path.join(tmp_path, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


MINI = """
[model]
name = dipole_cosine
epsilon = 1.0
c = 3.0
kappa = 2.0
lambda = 0.0
hbar = 0.1

[particle.1]
N = 1.0
gamma = 1.0
X0 = pi
P0 = 0.0

[particle.2]
N = 1.0
gamma = 1.0
X0 = -pi
P0 = 0.0

[he]
order = 0
even_reduction = false
dt = 0.002
t_end = 0.5

[outputs]
directory = {out}
sample_every = 10
emit = he_series
"""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_pi_literals():
    assert _parse_float("pi", "k") == pytest.approx(PI)
    assert _parse_float("-pi", "k") == pytest.approx(-PI)
    assert _parse_float("pi/2", "k") == pytest.approx(PI / 2)
    assert _parse_float("2*pi", "k") == pytest.approx(2 * PI)
    assert _parse_float("0.5*pi", "k") == pytest.approx(PI / 2)
    assert _parse_float("-4*pi", "k") == pytest.approx(-4 * PI)
    assert _parse_float("1.5e-3", "k") == pytest.approx(1.5e-3)
    with pytest.raises(ConfigError):
        _parse_float("two*pi", "k")


def test_bundled_scenarios_parse():
    for name in ("fig1", "fig2", "fig3", "fig4", "fig5", "fig6", "cosine"):
        cfg = load_config(name)
        assert cfg.hbar == 0.1
        assert cfg.packets


def test_missing_hbar_names_key(tmp_path):
    bad = MINI.format(out=tmp_path).replace("hbar = 0.1\n", "")
    path = write_cfg(tmp_path, bad)
    with pytest.raises(ConfigError, match="model.hbar"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    bad = MINI.format(out=tmp_path).replace("[he]", "[he]\nwidget = 3")
    path = write_cfg(tmp_path, bad)
    with pytest.raises(ConfigError, match="he.widget"):
        load_config(path)


def test_unknown_section_and_emit(tmp_path):
    bad = MINI.format(out=tmp_path) + "\n[extras]\nfoo = 1\n"
    with pytest.raises(ConfigError, match="extras"):
        load_config(write_cfg(tmp_path, bad))
    bad2 = MINI.format(out=tmp_path).replace("emit = he_series",
                                             "emit = he_series, plots")
    with pytest.raises(ConfigError, match="plots"):
        load_config(write_cfg(tmp_path, bad2, name="b2.cfg"))


def test_overrides(tmp_path):
    path = write_cfg(tmp_path, MINI.format(out=tmp_path))
    cfg = load_config(path, overrides=["model.hbar=0.2", "he.t_end=0.25",
                                       "particle.1.X0=pi/2"])
    assert cfg.hbar == 0.2
    assert cfg.he["t_end"] == 0.25
    assert cfg.packets[0].X0 == pytest.approx(PI / 2)


def test_compare_requires_other_sections(tmp_path):
    bad = MINI.format(out=tmp_path) + "\n[compare]\ntimes = 0.5\n"
    with pytest.raises(ConfigError, match="compare"):
        load_config(write_cfg(tmp_path, bad))


# ---------------------------------------------------------------------------
# scenario runs
# ---------------------------------------------------------------------------


def test_run_scenario_artifacts_and_determinism(tmp_path):
    path = write_cfg(tmp_path, MINI.format(out=os.path.join(tmp_path, "o")))
    cfg = load_config(path)
    manifest, outdir = run_scenario(cfg)
    series = os.path.join(outdir, "he_series.csv")
    assert os.path.exists(series)
    assert os.path.exists(os.path.join(outdir, "manifest.json"))
    entries = {a["path"]: a for a in manifest["artifacts"]}
    assert "he_series.csv" in entries
    import hashlib
    digest = hashlib.sha256(open(series, "rb").read()).hexdigest()
    assert entries["he_series.csv"]["sha256"] == digest
    first = open(series, "rb").read()
    run_scenario(cfg)
    second = open(series, "rb").read()
    assert first == second  # byte-identical rerun


def test_csv_schema_header(tmp_path):
    path = write_cfg(tmp_path, MINI.format(out=os.path.join(tmp_path, "o2")))
    cfg = load_config(path)
    _, outdir = run_scenario(cfg)
    header = open(os.path.join(outdir, "he_series.csv")).readline().strip().split(",")
    assert header[:5] == ["t", "X_1", "P_1", "mu0_1", "mu2_1"]
    assert "D2_2_1_xx" in header and "X_2" in header


# ---------------------------------------------------------------------------
# period estimation
# ---------------------------------------------------------------------------


def test_period_of_synthetic_signal():
    ts = np.arange(0.0, 20.0, 1e-3)
    xs = np.sin(2 * PI * ts / 6.36)
    assert period_estimate(ts, xs) == pytest.approx(6.36, abs=1e-3)


def test_period_needs_oscillations():
    ts = np.linspace(0, 10, 101)
    with pytest.raises(InsufficientOscillations):
        period_estimate(ts, np.ones_like(ts))
    with pytest.raises(InsufficientOscillations):
        period_estimate(ts, np.sin(2 * PI * ts / 9.0))  # just over 1 cycle


# ---------------------------------------------------------------------------
# command line entry
# ---------------------------------------------------------------------------


def test_main_exit_codes(tmp_path):
    # config failure
    assert main(["he", "--config", os.path.join(tmp_path, "nothere.cfg")]) == 2
    bad = MINI.format(out=tmp_path).replace("hbar = 0.1\n", "")
    assert main(["he", "--config", write_cfg(tmp_path, bad, "bad.cfg")]) == 2

    # numerical failure: immediate trajectory collision
    path = write_cfg(tmp_path, MINI.format(out=os.path.join(tmp_path, "oc")),
                     "collide.cfg")
    code = main(["he", "--config", path,
                 "--override", "particle.1.X0=1e-4",
                 "--override", "particle.2.X0=-1e-4"])
    assert code == 3

    # success
    okdir = os.path.join(tmp_path, "ok")
    path = write_cfg(tmp_path, MINI.format(out=okdir), "ok.cfg")
    assert main(["he", "--config", path]) == 0

    # period check failure -> 4
    series = os.path.join(okdir, "he_series.csv")
    ts = np.arange(0, 20, 1e-3)
    with open(series, "w") as fh:
        fh.write("t,X_1\n")
        for t, x in zip(ts, np.sin(2 * PI * ts / 5.0)):
            fh.write(f"{t:.6e},{x:.6e}\n")
    assert main(["period", "--series", series, "--column", "X_1",
                 "--expect", "6.36", "--rtol", "0.05"]) == 4
    assert main(["period", "--series", series, "--column", "X_1",
                 "--expect", "5.0", "--rtol", "0.05"]) == 0


def test_scan_hbar_cli(tmp_path):
    outdir = os.path.join(tmp_path, "scan")
    code = main(["scan-hbar", "--config", "cosine", "--out", outdir,
                 "--hbars", "0.4,0.1", "--require-monotone",
                 "--override", "reference.dt=0.001",
                 "--override", "evolution.correction=false"])
    assert code == 0
    rows = open(os.path.join(outdir, "hbar_scan.csv")).read().splitlines()
    assert rows[0] == "hbar,l2_rel,l2_rel_corrected,correction_ratio"
    assert len(rows) == 3
