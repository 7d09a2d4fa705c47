"""Config-driven scenario runner.

Scenarios are flat INI files with the sections documented in the README
(model, particle.N, he, evolution, reference, compare, outputs).  Stages
run in the order he -> evolution -> reference -> compare; a stage runs iff
its section is present.  All artifacts are CSV/JSON/raw binary with full
round-trip precision; runs are deterministic given the config.

Exit codes: 0 success, 2 config error, 3 numerical failure
(caustic / collision / non-finite / leak), 4 check failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import (BoundaryLeak, CausticSingular, CollisionError,
                     ConfigError, InsufficientOscillations, NonFinite,
                     QuadratureNotConverged, SemiqpError)
from .evolution import (assemble_solution, first_correction_1d,
                        integrate_action, integrate_m_matrix,
                        leading_term_gaussian)
from .hamilton_ehrenfest import (GaussianPacket, build_ensemble, integrate_he,
                                 unpack_sym2)
from .reference_solver import (ComplexField, Grid1D, SolverParams,
                               build_initial_field, compare_fields,
                               evolve_reference, save_snapshot)
from .symbols import MODEL_REGISTRY

__all__ = ["ScenarioConfig", "load_config", "run_scenario", "hbar_scan",
           "period_estimate", "main"]

_FLOAT_FMT = "%.17e"

_MODEL_PARAM_KEYS = {
    "dipole_cosine": {"epsilon", "c"},
    "dipole_cosine_farfield": {"epsilon", "c"},
    "harmonic": set(),
    "free": set(),
}

_SCHEMA = {
    "model": {"name", "epsilon", "c", "kappa", "lambda", "hbar",
              "moment_convention"},
    "he": {"order", "even_reduction", "dt", "t_end", "collision_threshold"},
    "evolution": {"x_min", "x_max", "x_points", "times", "correction",
                  "quad_steps", "dt"},
    "reference": {"L", "npoints", "dt", "t_end", "leak_threshold"},
    "compare": {"times"},
    "outputs": {"directory", "sample_every", "emit"},
}
_PARTICLE_KEYS = {"N", "gamma", "X0", "P0"}
_EMIT_CHOICES = {"he_series", "observables", "density", "ref_observables",
                 "comparison", "snapshots"}

_PI_RE = re.compile(
    r"^(?P<sign>[+-])?(?:(?P<coef>\d+(?:\.\d+)?)\*)?pi(?:/(?P<den>\d+(?:\.\d+)?))?$")


def _parse_float(text, path):
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    m = _PI_RE.match(text)
    if m:
        val = math.pi
        if m.group("coef"):
            val *= float(m.group("coef"))
        if m.group("den"):
            val /= float(m.group("den"))
        if m.group("sign") == "-":
            val = -val
        return val
    raise ConfigError(f"{path}: cannot parse number {text!r}")


def _parse_bool(text, path):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{path}: cannot parse boolean {text!r}")


def _parse_int(text, path):
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(f"{path}: cannot parse integer {text!r}")


def _parse_floats(text, path):
    return [_parse_float(tok, path) for tok in text.split(",") if tok.strip()]


@dataclass
class ScenarioConfig:
    """Validated scenario: model, packets, stage parameters, outputs."""

    name: str
    model_name: str
    model_params: dict
    kappa: float
    lam: float
    hbar: float
    moment_convention: str
    packets: list
    he: dict
    evolution: dict | None
    reference: dict | None
    compare: dict | None
    outputs: dict

    def build_model(self):
        return MODEL_REGISTRY[self.model_name](**self.model_params)


def _bundled_path(name):
    import importlib.resources as res
    base = res.files("semiqp") / "scenarios" / f"{name}.cfg"
    return base


def load_config(path_or_name, overrides=()) -> ScenarioConfig:
    """Parse and validate a scenario file (path, or bundled scenario name)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive
    path = str(path_or_name)
    name = os.path.splitext(os.path.basename(path))[0]
    if os.path.exists(path):
        with open(path) as fh:
            cp.read_file(fh)
    else:
        bundled = _bundled_path(name if "." not in os.path.basename(path)
                                else name)
        try:
            text = bundled.read_text()
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError(f"config not found: {path!r}")
        cp.read_string(text)

    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        loc, val = ov.split("=", 1)
        if "." not in loc:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        sec, key = loc.rsplit(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, key, val)

    # schema check: sections and keys
    for sec in cp.sections():
        if sec.startswith("particle."):
            tail = sec.split(".", 1)[1]
            if not tail.isdigit():
                raise ConfigError(f"[{sec}]: particle sections are particle.<index>")
            for key in cp[sec]:
                if key not in _PARTICLE_KEYS:
                    raise ConfigError(f"{sec}.{key}: unknown key")
            continue
        if sec not in _SCHEMA:
            raise ConfigError(f"[{sec}]: unknown section")
        for key in cp[sec]:
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")

    for required in ("model", "he", "outputs"):
        if not cp.has_section(required):
            raise ConfigError(f"missing required section [{required}]")

    msec = cp["model"]
    if "name" not in msec:
        raise ConfigError("model.name: missing")
    model_name = msec["name"].strip()
    if model_name not in MODEL_REGISTRY:
        raise ConfigError(f"model.name: unknown model {model_name!r}")
    if "hbar" not in msec:
        raise ConfigError("model.hbar: missing")
    hbar = _parse_float(msec["hbar"], "model.hbar")
    if hbar <= 0:
        raise ConfigError("model.hbar: must be positive")
    kappa = _parse_float(msec.get("kappa", "0"), "model.kappa")
    lam = _parse_float(msec.get("lambda", "0"), "model.lambda")
    convention = msec.get("moment_convention", "unnormalized").strip()
    if convention not in ("unnormalized", "normalized"):
        raise ConfigError("model.moment_convention: must be unnormalized|normalized")
    params = {}
    for key in ("epsilon", "c"):
        if key in msec:
            if key not in _MODEL_PARAM_KEYS[model_name]:
                raise ConfigError(f"model.{key}: not a parameter of {model_name}")
            params[key] = _parse_float(msec[key], f"model.{key}")

    particle_secs = sorted((s for s in cp.sections() if s.startswith("particle.")),
                           key=lambda s: int(s.split(".")[1]))
    if not particle_secs:
        raise ConfigError("at least one [particle.N] section required")
    packets = []
    for sec in particle_secs:
        p = cp[sec]
        packets.append(GaussianPacket(
            N=_parse_float(p.get("N", "1"), f"{sec}.N"),
            gamma=_parse_float(p.get("gamma", "1"), f"{sec}.gamma"),
            X0=_parse_float(p.get("X0", "0"), f"{sec}.X0"),
            P0=_parse_float(p.get("P0", "0"), f"{sec}.P0")))

    hs = cp["he"]
    he = {
        "order": _parse_int(hs.get("order", "0"), "he.order"),
        "even_reduction": _parse_bool(hs.get("even_reduction", "true"),
                                      "he.even_reduction"),
        "dt": _parse_float(hs.get("dt", "0.001"), "he.dt"),
        "t_end": _parse_float(hs.get("t_end", "10"), "he.t_end"),
    }
    if he["order"] not in (0, 1, 2, 3):
        raise ConfigError("he.order: must be 0..3")
    if "collision_threshold" in hs:
        he["collision_threshold"] = _parse_float(hs["collision_threshold"],
                                                 "he.collision_threshold")
    else:
        he["collision_threshold"] = None

    evolution = None
    if cp.has_section("evolution"):
        es = cp["evolution"]
        evolution = {
            "x_min": _parse_float(es.get("x_min", "-4*pi"), "evolution.x_min"),
            "x_max": _parse_float(es.get("x_max", "4*pi"), "evolution.x_max"),
            "x_points": _parse_int(es.get("x_points", "801"), "evolution.x_points"),
            "times": _parse_floats(es.get("times", "1.0"), "evolution.times"),
            "correction": _parse_bool(es.get("correction", "false"),
                                      "evolution.correction"),
            "quad_steps": _parse_int(es.get("quad_steps", "96"),
                                     "evolution.quad_steps"),
            "dt": _parse_float(es["dt"], "evolution.dt") if "dt" in es
                  else he["dt"],
        }
        if not evolution["times"]:
            raise ConfigError("evolution.times: at least one time required")
        if max(evolution["times"]) > he["t_end"] + 1e-12:
            raise ConfigError("evolution.times: beyond he.t_end")

    reference = None
    if cp.has_section("reference"):
        rs = cp["reference"]
        reference = {
            "L": _parse_float(rs.get("L", "4*pi"), "reference.L"),
            "npoints": _parse_int(rs.get("npoints", "2048"), "reference.npoints"),
            "dt": _parse_float(rs.get("dt", "0.001"), "reference.dt"),
            "leak_threshold": _parse_float(rs.get("leak_threshold", "1e-12"),
                                           "reference.leak_threshold"),
        }
        default_tend = (max(evolution["times"]) if evolution else he["t_end"])
        reference["t_end"] = (_parse_float(rs["t_end"], "reference.t_end")
                              if "t_end" in rs else default_tend)

    compare = None
    if cp.has_section("compare"):
        if evolution is None or reference is None:
            raise ConfigError("[compare] needs both [evolution] and [reference]")
        cs = cp["compare"]
        compare = {"times": (_parse_floats(cs["times"], "compare.times")
                             if "times" in cs else list(evolution["times"]))}

    os_ = cp["outputs"]
    if "directory" not in os_:
        raise ConfigError("outputs.directory: missing")
    emit = {tok.strip() for tok in os_.get("emit", "he_series").split(",")
            if tok.strip()}
    bad = emit - _EMIT_CHOICES
    if bad:
        raise ConfigError(f"outputs.emit: unknown artifacts {sorted(bad)}")
    outputs = {
        "directory": os_["directory"].strip(),
        "sample_every": _parse_int(os_.get("sample_every", "10"),
                                   "outputs.sample_every"),
        "emit": emit,
    }
    return ScenarioConfig(
        name=name, model_name=model_name, model_params=params, kappa=kappa,
        lam=lam, hbar=hbar, moment_convention=convention, packets=packets,
        he=he, evolution=evolution, reference=reference, compare=compare,
        outputs=outputs)


# ---------------------------------------------------------------------------
# CSV / manifest helpers
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FLOAT_FMT % v for v in row) + "\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _tag(t):
    return ("%g" % t).replace(".", "p").replace("-", "m")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def _run_he(cfg, model, diag):
    st0 = build_ensemble(cfg.packets, cfg.hbar, cfg.kappa, cfg.lam,
                         convention=cfg.moment_convention)
    traj = integrate_he(st0, model, order=cfg.he["order"],
                        even_reduction=cfg.he["even_reduction"],
                        t_end=cfg.he["t_end"], dt=cfg.he["dt"],
                        collision_threshold=cfg.he["collision_threshold"])
    diag["he"] = {
        "steps": int(len(traj.ts) - 1),
        "min_separation": float(np.min(traj.margins)),
        "order": cfg.he["order"],
        "even_reduction": cfg.he["even_reduction"],
    }
    return traj


def _emit_he_series(cfg, traj, outdir, artifacts):
    K = traj.template.K
    n = traj.template.n
    d = 2 * n
    order = traj.order
    every = cfg.outputs["sample_every"]
    idx = list(range(0, len(traj.ts), every))
    if idx[-1] != len(traj.ts) - 1:
        idx.append(len(traj.ts) - 1)
    header = ["t"]
    for s in range(1, K + 1):
        header += [f"X_{s}", f"P_{s}", f"mu0_{s}", f"mu2_{s}",
                   f"D1_2_{s}_p", f"D1_2_{s}_x",
                   f"D2_2_{s}_pp", f"D2_2_{s}_px", f"D2_2_{s}_xx"]
        if order == 3 and not traj.even_reduction:
            header += [f"mu1_{s}", f"mu3_{s}", f"D1_1_{s}_p", f"D1_1_{s}_x"]
    rows = []
    for i in idx:
        st = traj.state_at_index(i)
        row = [st.t]
        for s in range(K):
            row += [st.Z[s, 1], st.Z[s, 0], st.mu[s, 0], st.mu[s, 2]]
            row += list(st.d1[s, 1])
            row += list(st.d2[s, 0])
            if order == 3 and not traj.even_reduction:
                row += [st.mu[s, 1], st.mu[s, 3]]
                row += list(st.d1[s, 0])
        rows.append(row)
    path = os.path.join(outdir, "he_series.csv")
    _write_csv(path, header, rows)
    artifacts.append(path)


def _emit_observables(cfg, traj, outdir, artifacts):
    K = traj.template.K
    every = cfg.outputs["sample_every"]
    idx = list(range(0, len(traj.ts), every))
    if idx[-1] != len(traj.ts) - 1:
        idx.append(len(traj.ts) - 1)
    h = traj.hbar
    header = ["t"]
    for s in range(1, K + 1):
        header += [f"sigma2_{s}", f"X_corr_{s}", f"P_corr_{s}",
                   f"X_corr_alt_{s}", f"P_corr_alt_{s}"]
    rows = []
    for i in idx:
        st = traj.state_at_index(i)
        row = [st.t]
        for s in range(K):
            D2 = unpack_sym2(st.d2[s, 0], st.d)
            den = st.mu[s, 0] + h * st.mu[s, 2]
            sig2 = h * D2[1, 1] / den
            dz = h * st.d1[s, 1] / den
            dz_alt = h * st.d1[s, 1] / st.mu[s, 0]
            row += [sig2, st.Z[s, 1] + dz[1], st.Z[s, 0] + dz[0],
                    st.Z[s, 1] + dz_alt[1], st.Z[s, 0] + dz_alt[0]]
        rows.append(row)
    path = os.path.join(outdir, "observables.csv")
    _write_csv(path, header, rows)
    artifacts.append(path)


def _run_evolution(cfg, model, traj, diag):
    ev = cfg.evolution
    t_max = max(ev["times"])
    x_grid = np.linspace(ev["x_min"], ev["x_max"], ev["x_points"])
    mlist, plist = [], []
    for s in range(len(cfg.packets)):
        mlist.append(integrate_m_matrix(traj, model, s, t_max, ev["dt"]))
        plist.append(integrate_action(traj, model, s, t_max, ev["dt"]))
    fields = {}
    for t in ev["times"]:
        psi0s, psi1s = [], []
        for s, pk in enumerate(cfg.packets):
            psi0s.append(leading_term_gaussian(pk, s, traj, plist[s], mlist[s],
                                               x_grid, t))
            if ev["correction"]:
                psi1s.append(first_correction_1d(
                    pk, s, traj, model, plist[s], mlist[s], x_grid, t,
                    quad_steps=ev["quad_steps"]))
        sol = assemble_solution(psi0s, x_grid, cfg.hbar,
                                psi1_list=psi1s if ev["correction"] else None)
        fields[t] = sol
    diag["evolution"] = {
        "max_symplectic_defect": float(max(m.max_defect() for m in mlist)),
        "x_points": ev["x_points"],
        "correction": ev["correction"],
        "norm_vs_mass": {
            ("%g" % t): {
                "field_norm2": fields[t].norm2_leading(),
                "mass_sum": float(sum(traj.interpolate(t).full_moments(s)[0]
                                      for s in range(len(cfg.packets)))),
            } for t in ev["times"]
        },
    }
    return x_grid, fields


def _emit_density(cfg, x_grid, fields, outdir, artifacts):
    for t, sol in sorted(fields.items()):
        psi = sol.psi
        rows = np.column_stack([x_grid, psi.real, psi.imag, np.abs(psi) ** 2])
        path = os.path.join(outdir, f"density_t{_tag(t)}.csv")
        _write_csv(path, ["x", "re", "im", "density"], rows)
        artifacts.append(path)


def _run_reference(cfg, diag):
    rf = cfg.reference
    grid = Grid1D(L=rf["L"], npoints=rf["npoints"])
    par = SolverParams(epsilon=cfg.model_params.get("epsilon", 0.0),
                       c=cfg.model_params.get("c", 1.0),
                       kappa=cfg.kappa, lam=cfg.lam)
    psi0 = build_initial_field(grid, cfg.packets, cfg.hbar)
    nsteps = int(round(rf["t_end"] / rf["dt"]))
    sample_every = max(1, nsteps // 400)
    snapshot_times = sorted(cfg.compare["times"]) if cfg.compare else None
    xs = sorted(p.X0 for p in cfg.packets)
    partition = tuple(0.5 * (a + b) for a, b in zip(xs[:-1], xs[1:]))
    ser = evolve_reference(psi0, par, rf["t_end"], rf["dt"],
                           sample_every=sample_every,
                           snapshot_times=snapshot_times,
                           partition_points=partition,
                           leak_threshold=rf["leak_threshold"])
    edge = max(float(np.abs(f.values[0]) ** 2 + np.abs(f.values[-1]) ** 2)
               for f in ser.fields)
    diag["reference"] = {
        "steps": nsteps,
        "max_edge_density": edge,
        "norm_initial": ser.obs[0].norm,
        "norm_final": ser.obs[-1].norm,
    }
    return grid, par, ser


def _emit_ref_observables(cfg, par, ser, outdir, artifacts):
    Kreg = len(ser.obs[0].region_masses)
    header = (["t", "norm", "center", "variance", "mass_rate"]
              + [f"region_mass_{i + 1}" for i in range(Kreg)])
    rows = []
    for t, ob, rate in zip(ser.obs_ts, ser.obs, ser.mass_rates):
        rows.append([t, ob.norm, ob.center, ob.variance, rate]
                    + list(ob.region_masses))
    path = os.path.join(outdir, "ref_observables.csv")
    _write_csv(path, header, rows)
    artifacts.append(path)


def _emit_snapshots(cfg, ser, outdir, artifacts, times):
    for t in times:
        try:
            f = ser.field_at(t)
        except SemiqpError:
            continue
        pb = os.path.join(outdir, f"ref_t{_tag(t)}.bin")
        pj = os.path.join(outdir, f"ref_t{_tag(t)}.json")
        save_snapshot(f, pb, pj, extra={"scenario": cfg.name})
        artifacts.extend([pb, pj])


def _run_compare(cfg, model, traj, grid, par, ser, diag):
    """Semiclassical fields evaluated on the reference grid at the compare
    times, against stored reference snapshots."""
    ev = cfg.evolution
    times = cfg.compare["times"]
    t_max = max(times)
    mlist, plist = [], []
    for s in range(len(cfg.packets)):
        mlist.append(integrate_m_matrix(traj, model, s, t_max, ev["dt"]))
        plist.append(integrate_action(traj, model, s, t_max, ev["dt"]))
    rows = []
    for t in times:
        ref = ser.field_at(t)
        psi0s, psi1s = [], []
        for s, pk in enumerate(cfg.packets):
            psi0s.append(leading_term_gaussian(pk, s, traj, plist[s], mlist[s],
                                               grid.x, t))
            if ev["correction"]:
                psi1s.append(first_correction_1d(
                    pk, s, traj, model, plist[s], mlist[s], grid.x, t,
                    quad_steps=ev["quad_steps"]))
        lead = ComplexField(grid, np.sum(psi0s, axis=0), t, cfg.hbar)
        row = [t,
               compare_fields(lead, ref, "l2_rel"),
               compare_fields(lead, ref, "density_l2")]
        if ev["correction"]:
            tot = ComplexField(
                grid, lead.values + math.sqrt(cfg.hbar) * np.sum(psi1s, axis=0),
                t, cfg.hbar)
            row.append(compare_fields(tot, ref, "l2_rel"))
        rows.append(row)
    header = ["t", "l2_rel", "density_l2"]
    if ev["correction"]:
        header.append("l2_rel_corrected")
    diag["compare"] = {"worst_l2_rel": float(max(r[1] for r in rows))}
    return header, rows


def run_scenario(cfg: ScenarioConfig, out_dir=None, stages=None):
    """Execute the configured pipeline; returns (manifest dict, out_dir).

    ``stages`` restricts execution ("he", "evolution", "reference",
    "compare"); prerequisites are run in memory regardless, artifacts are
    emitted only for requested stages.
    """
    outdir = out_dir or cfg.outputs["directory"]
    os.makedirs(outdir, exist_ok=True)
    emit = cfg.outputs["emit"]
    want = set(stages) if stages else {"he", "evolution", "reference", "compare"}
    model = cfg.build_model()
    diag = {}
    artifacts = []
    timings = {}

    t0 = time.perf_counter()
    traj = _run_he(cfg, model, diag)
    timings["he"] = time.perf_counter() - t0
    if "he" in want:
        if "he_series" in emit:
            _emit_he_series(cfg, traj, outdir, artifacts)
        if "observables" in emit and cfg.he["order"] >= 2:
            _emit_observables(cfg, traj, outdir, artifacts)

    fields = None
    if cfg.evolution is not None and ({"evolution", "compare"} & want):
        t0 = time.perf_counter()
        x_grid, fields = _run_evolution(cfg, model, traj, diag)
        timings["evolution"] = time.perf_counter() - t0
        if "evolution" in want and "density" in emit:
            _emit_density(cfg, x_grid, fields, outdir, artifacts)

    grid = par = ser = None
    if cfg.reference is not None and ({"reference", "compare"} & want):
        t0 = time.perf_counter()
        grid, par, ser = _run_reference(cfg, diag)
        timings["reference"] = time.perf_counter() - t0
        if "reference" in want:
            if "ref_observables" in emit:
                _emit_ref_observables(cfg, par, ser, outdir, artifacts)
            if "snapshots" in emit:
                times = (cfg.compare["times"] if cfg.compare
                         else ([cfg.reference["t_end"]]))
                _emit_snapshots(cfg, ser, outdir, artifacts, times)

    if (cfg.compare is not None and "compare" in want
            and ser is not None and cfg.evolution is not None):
        t0 = time.perf_counter()
        header, rows = _run_compare(cfg, model, traj, grid, par, ser, diag)
        timings["compare"] = time.perf_counter() - t0
        if "comparison" in emit:
            path = os.path.join(outdir, "comparison.csv")
            _write_csv(path, header, rows)
            artifacts.append(path)

    manifest = {
        "scenario": cfg.name,
        "package_version": __version__,
        "parameters": {
            "model": cfg.model_name, **cfg.model_params,
            "kappa": cfg.kappa, "lambda": cfg.lam, "hbar": cfg.hbar,
            "moment_convention": cfg.moment_convention,
            "particles": [vars(p) for p in cfg.packets],
            "he": {k: v for k, v in cfg.he.items()},
            "evolution": cfg.evolution, "reference": cfg.reference,
            "compare": cfg.compare,
        },
        "diagnostics": diag,
        "walltime_s": {k: round(v, 4) for k, v in timings.items()},
        "artifacts": [{"path": os.path.relpath(p, outdir),
                       "sha256": _sha256(p),
                       "bytes": os.path.getsize(p)} for p in artifacts],
        "versions": {"numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest, outdir


# ---------------------------------------------------------------------------
# scans and period measurement
# ---------------------------------------------------------------------------


def period_estimate(ts, xs):
    """Oscillation period from successive same-direction zero crossings of
    the mean-removed signal, averaged over all full periods."""
    ts = np.asarray(ts, dtype=float)
    xs = np.asarray(xs, dtype=float)
    y = xs - xs.mean()
    up = np.where((y[:-1] < 0) & (y[1:] >= 0))[0]
    if up.size < 3:
        raise InsufficientOscillations(
            f"need at least 2 full oscillations, found {max(0, up.size - 1)}")
    crossings = ts[up] - y[up] * (ts[up + 1] - ts[up]) / (y[up + 1] - y[up])
    return float(np.diff(crossings).mean())


def hbar_scan(cfg: ScenarioConfig, hbars, correction=None):
    """Rerun the scenario comparison at several hbar values.

    Returns a list of rows (hbar, l2_rel, l2_rel_corrected or nan,
    correction_ratio or nan) and a strictly-decreasing flag for l2_rel.
    """
    if cfg.evolution is None or cfg.reference is None:
        raise ConfigError("hbar scan needs [evolution] and [reference] sections")
    use_corr = cfg.evolution["correction"] if correction is None else correction
    t = max(cfg.compare["times"]) if cfg.compare else max(cfg.evolution["times"])
    rows = []
    for h in hbars:
        model = cfg.build_model()
        st0 = build_ensemble(cfg.packets, h, cfg.kappa, cfg.lam,
                             convention=cfg.moment_convention)
        traj = integrate_he(st0, model, order=cfg.he["order"],
                            even_reduction=cfg.he["even_reduction"],
                            t_end=cfg.he["t_end"], dt=cfg.he["dt"])
        grid = Grid1D(L=cfg.reference["L"], npoints=cfg.reference["npoints"])
        par = SolverParams(epsilon=cfg.model_params.get("epsilon", 0.0),
                           c=cfg.model_params.get("c", 1.0),
                           kappa=cfg.kappa, lam=cfg.lam)
        psi0 = build_initial_field(grid, cfg.packets, h)
        nst = int(round(t / cfg.reference["dt"]))
        ser = evolve_reference(psi0, par, t, cfg.reference["dt"],
                               sample_every=max(1, nst))
        ref = ser.final
        psi0s, psi1s = [], []
        for s, pk in enumerate(cfg.packets):
            ms = integrate_m_matrix(traj, model, s, t, cfg.evolution["dt"])
            ph = integrate_action(traj, model, s, t, cfg.evolution["dt"])
            psi0s.append(leading_term_gaussian(pk, s, traj, ph, ms, grid.x, t))
            if use_corr:
                psi1s.append(first_correction_1d(
                    pk, s, traj, model, ph, ms, grid.x, t,
                    quad_steps=cfg.evolution["quad_steps"]))
        lead = ComplexField(grid, np.sum(psi0s, axis=0), t, h)
        e0 = compare_fields(lead, ref, "l2_rel")
        e1 = ratio = float("nan")
        if use_corr:
            tot = ComplexField(grid, lead.values
                               + math.sqrt(h) * np.sum(psi1s, axis=0), t, h)
            e1 = compare_fields(tot, ref, "l2_rel")
            ratio = (math.sqrt(h) * float(np.linalg.norm(np.sum(psi1s, axis=0)))
                     / float(np.linalg.norm(lead.values)))
        rows.append((h, e0, e1, ratio))
    errs = [r[1] for r in sorted(rows, key=lambda r: -r[0])]
    monotone = all(a > b for a, b in zip(errs[:-1], errs[1:]))
    return rows, monotone


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _read_csv_column(path, column):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if column not in header:
            raise ConfigError(f"column {column!r} not in {path} "
                              f"(have {header})")
        icol = header.index(column)
        it = header.index("t") if "t" in header else 0
        ts, xs = [], []
        for line in fh:
            parts = line.strip().split(",")
            ts.append(float(parts[it]))
            xs.append(float(parts[icol]))
    return np.array(ts), np.array(xs)


def _add_common(p):
    p.add_argument("--config", required=True,
                   help="scenario file path or bundled name (fig1..fig6, cosine)")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--override", action="append", default=[],
                   metavar="SEC.KEY=VAL", help="config override (repeatable)")


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="semiqp",
        description="Semiclassical quasiparticle scenarios for the damped "
                    "nonlocal NLSE")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd, hlp in (("he", "moment hierarchy only"),
                     ("evolve", "hierarchy + semiclassical fields"),
                     ("reference", "direct PDE solve only"),
                     ("compare", "full pipeline with comparison")):
        p = sub.add_parser(cmd, help=hlp)
        _add_common(p)
        if cmd == "compare":
            p.add_argument("--max-l2", type=float, default=None,
                           help="fail (exit 4) if worst l2_rel exceeds this")
    p = sub.add_parser("scan-hbar", help="semiclassical convergence scan")
    _add_common(p)
    p.add_argument("--hbars", default="0.4,0.2,0.1,0.05",
                   help="comma list of hbar values")
    p.add_argument("--correction", action="store_true",
                   help="include the first correction in the scan")
    p.add_argument("--require-monotone", action="store_true",
                   help="fail (exit 4) unless l2_rel strictly decreases")
    p = sub.add_parser("period", help="oscillation period from a series CSV")
    p.add_argument("--series", required=True, help="CSV with a t column")
    p.add_argument("--column", required=True, help="signal column name")
    p.add_argument("--expect", type=float, default=None)
    p.add_argument("--rtol", type=float, default=0.05)
    args = ap.parse_args(argv)

    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CausticSingular, CollisionError, NonFinite, BoundaryLeak,
            QuadratureNotConverged, InsufficientOscillations) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


_STAGES = {"he": {"he"}, "evolve": {"he", "evolution"},
           "reference": {"he", "reference"},
           "compare": {"he", "evolution", "reference", "compare"}}


def _dispatch(args):
    if args.command == "period":
        ts, xs = _read_csv_column(args.series, args.column)
        period = period_estimate(ts, xs)
        print(f"period {period:.6f}")
        if args.expect is not None:
            rel = abs(period - args.expect) / abs(args.expect)
            print(f"relative deviation from {args.expect}: {rel:.4f}")
            if rel > args.rtol:
                print("period check FAILED", file=sys.stderr)
                return 4
        return 0

    cfg = load_config(args.config, overrides=args.override)
    if args.command == "scan-hbar":
        hbars = [float(tok) for tok in args.hbars.split(",") if tok.strip()]
        rows, monotone = hbar_scan(cfg, hbars, correction=args.correction or None)
        outdir = args.out or cfg.outputs["directory"]
        os.makedirs(outdir, exist_ok=True)
        path = os.path.join(outdir, "hbar_scan.csv")
        _write_csv(path, ["hbar", "l2_rel", "l2_rel_corrected",
                          "correction_ratio"], rows)
        for h, e0, e1, r in rows:
            print(f"hbar={h:g}  l2_rel={e0:.6f}  corrected={e1:.6f}  "
                  f"ratio={r:.6f}")
        print(f"monotone decreasing: {monotone}  (table: {path})")
        if args.require_monotone and not monotone:
            return 4
        return 0

    manifest, outdir = run_scenario(cfg, out_dir=args.out,
                                    stages=_STAGES[args.command])
    print(f"scenario {cfg.name}: artifacts in {outdir}")
    for art in manifest["artifacts"]:
        print(f"  {art['path']}  ({art['bytes']} bytes)")
    if args.command == "compare" and args.max_l2 is not None:
        worst = manifest["diagnostics"].get("compare", {}).get("worst_l2_rel")
        if worst is None or worst > args.max_l2:
            print(f"comparison check FAILED: worst l2_rel {worst} > "
                  f"{args.max_l2}", file=sys.stderr)
            return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
