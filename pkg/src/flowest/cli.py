"""Command-line pipeline: synth -> pod -> calibrate -> estimate -> report.

Stages talk to each other only through files under ``--output-dir``::

    synth/      snapshots, truth coefficients, true ROM, true modes
    pod/        basis (+ .eig sidecar), coefficients of every snapshot
    rom/        calibrated ROM, calibration residual table
    estimate/   measurements, one trajectory per method, telemetry, report
    report/     coefficient / component tables, key-value export, C_R sweep

Exit codes: 0 success, 2 invalid configuration, 3 computation failure,
4 missing or unreadable files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import __version__
from . import config as cfgmod
from .collocation import CalibrationError, build_collocation, calibrate, calibration_report, resample, resample_trajectory
from .estimators import (EstimatorError, default_segment_length, lse_estimate, lse_fit, lsq_estimate, qse_estimate,
                         qse_fit, slse_estimate, slse_fit)
from .fields import Grid, GridMismatchError, SnapshotSet
from .metrics import ErrorReport, coefficient_error, export_key_values, field_error, render_report
from .observer import ObserverError, assemble_problem, c_r_sweep, sliding_window_estimate, solve
from .pod import RankError, compute_pod, load_basis, project_many, reconstruct_many, save_basis
from .records import CoefficientTrajectory, load_trajectory, save_record, save_trajectory, write_table
from .rom import BlowUpError, assemble_quadratic_tensor, load_rom, save_rom
from .sensors import SensorError, SensorSpec, build_suite, sample_measurements
from .snapshot_io import SnapshotFileError, load_snapshots
from .synth import SynthesisError, export_scenario, load_scenario, make_scenario

log = logging.getLogger("flowest")

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE, EXIT_IO = 0, 2, 3, 4
DEFAULT_OBSERVER_NODES = 41


class ArtifactError(OSError):
    """Missing or unreadable pipeline file."""


@dataclass
class Context:
    cfg: dict
    out: str
    seed: int

    @property
    def ext(self) -> str:
        return ".bin" if self.cfg["paths"]["format"] == "binary" else ".txt"

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def stage_dir(self, name: str) -> str:
        d = self.path(name)
        os.makedirs(d, exist_ok=True)
        return d


# --- provenance -------------------------------------------------------------------

def sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(ctx: Context, stage: str, inputs: Sequence[str], params: dict) -> list[str]:
    """Header lines: producer, parameters and input hashes (no timestamps, so reruns are byte-identical)."""
    lines = [f"flowest {__version__} {stage}", f"seed {ctx.seed}",
             "params " + json.dumps(params, sort_keys=True, separators=(",", ":"))]
    for p in inputs:
        lines.append(f"input {os.path.relpath(p, ctx.out)} sha256 {sha256(p)}")
    return lines


def write_text(path: str, header: Sequence[str], body: str) -> None:
    with open(path, "w") as fh:
        fh.write("".join(f"# {h}\n" for h in header) + body)


# --- artifact access ------------------------------------------------------------

def _need(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise ArtifactError(f"{path} not found; run `flowest {producer}` first")
    return path


def _load(loader: Callable, path: str, producer: str):
    _need(path, producer)
    try:
        return loader(path)
    except (ValueError, SnapshotFileError) as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


def _snapshot_path(ctx: Context) -> str:
    return ctx.cfg["paths"].get("snapshots") or ctx.path("synth", "snapshots" + ctx.ext)


def _section(ctx: Context, name: str) -> dict:
    if name not in ctx.cfg:
        raise cfgmod.ConfigError(f"{name}: section required by this command is missing")
    return ctx.cfg[name]


def _reference_on(ref: CoefficientTrajectory, times: np.ndarray) -> CoefficientTrajectory:
    """Reference coefficients at ``times`` (exact samples when they coincide)."""
    times = np.asarray(times, dtype=float)
    idx = np.searchsorted(ref.times, times)
    if np.all(idx < len(ref)) and np.allclose(ref.times[np.minimum(idx, len(ref) - 1)], times, rtol=0, atol=1e-12):
        return CoefficientTrajectory(times, ref.values[idx])
    return CoefficientTrajectory(times, resample(ref.times, ref.values, times))


def _fields_at(snaps: SnapshotSet, times: np.ndarray) -> np.ndarray:
    """Snapshot fields linearly interpolated in time."""
    arr = snaps.array()
    t = snaps.times
    times = np.asarray(times, dtype=float)
    if times.min() < t[0] - 1e-12 or times.max() > t[-1] + 1e-12:
        raise EstimatorError(f"times {times.min()}-{times.max()} outside snapshots {t[0]}-{t[-1]}")
    i = np.clip(np.searchsorted(t, times, side="right") - 1, 0, len(t) - 2)
    w = np.clip((times - t[i]) / (t[i + 1] - t[i]), 0.0, 1.0)
    shape = (-1,) + (1,) * (arr.ndim - 1)
    return (1 - w).reshape(shape) * arr[i] + w.reshape(shape) * arr[i + 1]


# --- stages -----------------------------------------------------------------------

def cmd_synth(ctx: Context) -> list[str]:
    s = _section(ctx, "synth")
    g = s["grid"]
    ndim = len(g["dims"])
    grid = Grid.uniform(g["dims"], g.get("lower", [0.0] * ndim), g.get("upper", [1.0] * ndim))
    scenario = make_scenario(grid, s["n_modes"], s["dynamics"], tuple(s["span"]), s["dt"], ctx.seed,
                             n_unresolved=s["n_unresolved"], burn_in=s.get("burn_in"),
                             sample_every=s["sample_every"], family=s["family"],
                             tail_strength=s["tail_strength"])
    header = provenance(ctx, "synth", [], s)
    paths = export_scenario(scenario, ctx.stage_dir("synth"), ctx.cfg["paths"]["format"], header)
    return sorted(paths.values())


def cmd_pod(ctx: Context) -> list[str]:
    p = _section(ctx, "pod")
    src = _snapshot_path(ctx)
    snaps = _load(load_snapshots, src, "synth")
    train = snaps.select(*p["window"]) if "window" in p else snaps
    basis = compute_pod(train, p["n_retained"])
    d = ctx.stage_dir("pod")
    header = provenance(ctx, "pod", [src], p)
    basis_path = os.path.join(d, "basis" + ctx.ext)
    save_basis(basis, basis_path, ctx.cfg["paths"]["format"], header)
    coeffs = CoefficientTrajectory(snaps.times, project_many(basis, snaps.array()))
    coef_path = os.path.join(d, "coefficients.txt")
    save_trajectory(coeffs, coef_path, header + ["coefficients of every snapshot on the retained modes"])
    return [basis_path, basis_path + ".eig", coef_path]


def _operator(ctx: Context, kind: str):
    if kind == "convective":
        return None
    _need(ctx.path("synth", "scenario.json"), "synth")
    return _load(load_scenario, ctx.path("synth"), "synth").operator


def cmd_calibrate(ctx: Context) -> list[str]:
    c = _section(ctx, "calibration")
    basis_path = ctx.path("pod", "basis" + ctx.ext)
    coef_path = ctx.path("pod", "coefficients.txt")
    basis = _load(load_basis, basis_path, "pod")
    coeffs = _load(load_trajectory, coef_path, "pod")
    op = build_collocation(*c["window"], c["n_nodes"])
    ref = resample_trajectory(coeffs, op)
    b_quad = assemble_quadratic_tensor(basis, _operator(ctx, c["nonlinear"]))
    rom = calibrate(b_quad, ref, op)
    rep = calibration_report(b_quad, ref, op, rom)
    d = ctx.stage_dir("rom")
    inputs = [basis_path, coef_path]
    if c["nonlinear"] == "synthetic":
        inputs.append(ctx.path("synth", "true_rom.txt"))
    header = provenance(ctx, "calibrate", inputs, c)
    rom_path = os.path.join(d, "rom.txt")
    save_rom(rom, rom_path, header)
    rep_path = os.path.join(d, "calibration.txt")
    write_table(rep_path, np.arange(1.0, rom.n_modes + 1.0),
                np.column_stack([rep["residual_before"], rep["residual_after"], rep["condition"]]),
                ["residual_before", "residual_after", "condition"],
                header + ["first column is the mode index; residual norms over the collocation nodes"])
    return [rom_path, rep_path]


def _estimation_inputs(ctx: Context):
    e = _section(ctx, "estimation")
    basis_path = ctx.path("pod", "basis" + ctx.ext)
    coef_path = ctx.path("pod", "coefficients.txt")
    src = _snapshot_path(ctx)
    basis = _load(load_basis, basis_path, "pod")
    coeffs = _load(load_trajectory, coef_path, "pod")
    snaps = _load(load_snapshots, src, "synth")
    specs = [SensorSpec.from_dict(s) for s in _section(ctx, "sensors")]
    suite = build_suite(specs, basis)
    return e, basis, coeffs, snaps, suite, [src, basis_path, coef_path]


def _run_method(m: dict, suite, rec_train, rec_w, train, rom, lse_model):
    name = m["method"]
    telemetry = None
    if name == "LSQ":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            est = lsq_estimate(suite, rec_w)
    elif name == "LSE":
        est = lse_estimate(lse_model, rec_w)
    elif name == "QSE":
        est = qse_estimate(qse_fit(train, rec_train, suite.ref_offset), rec_w)
    elif name == "SLSE":
        length = m.get("segment_length") or min(default_segment_length(len(rec_train), suite.n_sensors), len(rec_w))
        est = slse_estimate(slse_fit(train, rec_train, suite.ref_offset, length), rec_w)
    else:
        misfit = m.get("misfit", "auto")
        n_nodes = m.get("n_nodes", DEFAULT_OBSERVER_NODES)
        max_iter = m.get("max_iter", 50)
        if "window" in m:
            res = sliding_window_estimate(rom, suite, rec_w, m["window"], m.get("stride", 1), name, m.get("c_r"),
                                          lse_model, n_nodes, max_iter=max_iter, misfit=misfit)
            est = res.estimates
            reports = res.reports
            ends = [s.times[-1] for s in res.solutions]
        else:
            problem = assemble_problem(rom, suite, rec_w, name, lse_model, m.get("c_r"),
                                       min(n_nodes, max(len(rec_w), 2)), misfit)
            est, report = solve(problem, max_iter=max_iter)
            reports, ends = [report], [est.times[-1]]
        telemetry = (np.array(ends), np.array([[r.iterations, float(r.converged), r.objective_history[-1],
                                                r.residual_history[-1]] for r in reports]))
    return est, telemetry


def cmd_estimate(ctx: Context) -> list[str]:
    e, basis, coeffs, snaps, suite, inputs = _estimation_inputs(ctx)
    methods = e["methods"]
    rom = None
    if any(m["method"] in ("K-LSQ", "K-LSE") for m in methods):
        rom_path = ctx.path("rom", "rom.txt")
        rom = _load(load_rom, rom_path, "calibrate")
        inputs.append(rom_path)
    rec = sample_measurements(suite, snaps, snaps.times)
    rec_train = rec.between(*e["training_window"])
    train = coeffs.between(*e["training_window"])
    rec_w = rec.between(*e["window"])
    lse_model = lse_fit(train, rec_train, suite.ref_offset)
    d = ctx.stage_dir("estimate")
    header = provenance(ctx, "estimate", inputs, {"estimation": e, "sensors": ctx.cfg["sensors"]})
    out = []
    meas_path = os.path.join(d, "measurements.txt")
    save_record(rec, meas_path, header)
    out.append(meas_path)
    reports = []
    for m in methods:
        est, telemetry = _run_method(m, suite, rec_train, rec_w, train, rom, lse_model)
        path = os.path.join(d, f"{m['method']}.txt")
        save_trajectory(est, path, header + [f"method {json.dumps(m, sort_keys=True)}"] + list(est.notes))
        out.append(path)
        if telemetry is not None:
            tpath = os.path.join(d, f"{m['method']}.telemetry.txt")
            write_table(tpath, telemetry[0], telemetry[1], ["iterations", "converged", "objective", "grad_norm"],
                        header + ["one row per observer window, keyed by the window end time"])
            out.append(tpath)
        reports.append(ErrorReport(m["method"], coefficient_error(est, _reference_on(coeffs, est.times)),
                                   averaging_window=tuple(e["window"])))
    rpath = os.path.join(d, "report.txt")
    write_text(rpath, header + ["coefficient errors in percent against the POD projection of the snapshots"],
               render_report(reports, "coefficient-table"))
    out.append(rpath)
    return out


def cmd_report(ctx: Context) -> list[str]:
    e, basis, coeffs, snaps, suite, inputs = _estimation_inputs(ctx)
    r = ctx.cfg["report"]
    reports = []
    est_inputs = []
    for m in e["methods"]:
        path = ctx.path("estimate", f"{m['method']}.txt")
        est = _load(load_trajectory, path, "estimate")
        est_inputs.append(path)
        truth = _fields_at(snaps, est.times)
        fields = reconstruct_many(basis, est.values)
        reports.append(ErrorReport(
            m["method"],
            per_coefficient=coefficient_error(est, _reference_on(coeffs, est.times)),
            per_component=field_error(fields, truth, est.times, "total", basis),
            fluctuating=field_error(fields, truth, est.times, "fluctuating", basis),
            projected=field_error(fields, truth, est.times, "pod-projected", basis),
            averaging_window=tuple(e["window"])))
    d = ctx.stage_dir("report")
    header = provenance(ctx, "report", inputs + est_inputs, {"report": r, "estimation": e})
    out = []
    for name, layout in (("coefficients.txt", "coefficient-table"), ("components.txt", "component-table")):
        path = os.path.join(d, name)
        write_text(path, header, render_report(reports, layout))
        out.append(path)
    kv = os.path.join(d, "errors.jsonl")
    with open(kv, "w") as fh:
        fh.write(export_key_values(reports))
    out.append(kv)
    rom_path = ctx.path("rom", "rom.txt")
    if os.path.exists(rom_path):
        rom = _load(load_rom, rom_path, "calibrate")
        rec = sample_measurements(suite, snaps, snaps.times)
        rec_train = rec.between(*e["training_window"])
        lse_model = lse_fit(coeffs.between(*e["training_window"]), rec_train, suite.ref_offset)
        rec_w = rec.between(*e["window"])
        n_nodes = r.get("sweep_n_nodes", min(DEFAULT_OBSERVER_NODES, len(rec_w)))
        op = build_collocation(*rec_w.span, n_nodes)
        rows = c_r_sweep(rom, suite, rec_w, r["sweep_variant"], r["c_r_values"], lse_model, n_nodes,
                         _reference_on(coeffs, op.nodes))
        cols = ["model_residual", "target_misfit", "iterations", "converged", "mean_coefficient_error"]
        path = os.path.join(d, "c_r_sweep.txt")
        write_table(path, [row["c_r"] for row in rows], [[float(row[c]) for c in cols] for row in rows],
                    cols, header + [f"{r['sweep_variant']} C_R sweep; first column is C_R"])
        out.append(path)
    return out


COMMANDS = {"synth": cmd_synth, "pod": cmd_pod, "calibrate": cmd_calibrate, "estimate": cmd_estimate,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the verb
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--output-dir", help="override paths.output_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="flowest", parents=[common],
                                     description="Flow-state estimation from sparse sensors with a POD/Galerkin ROM.")
    parser.add_argument("--version", action="version", version=f"flowest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"synth": "generate a synthetic scenario", "pod": "compute the POD basis",
             "calibrate": "assemble and calibrate the ROM", "estimate": "run the estimators",
             "report": "error tables and C_R sweep"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _context(args) -> Context:
    path = getattr(args, "config", None)
    if not path:
        raise cfgmod.ConfigError("--config: a configuration file is required")
    if not os.path.exists(path):
        raise ArtifactError(f"configuration file {path} not found")
    raw = cfgmod.load(path)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        raw.setdefault("paths", {})["output_dir"] = args.output_dir
    cfg = cfgmod.validate(raw)
    out = cfg["paths"]["output_dir"]
    os.makedirs(out, exist_ok=True)
    return Context(cfg, out, cfg["seed"])


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        ctx = _context(args)
        for path in COMMANDS[args.command](ctx):
            print(path)
        return EXIT_OK
    except (cfgmod.ConfigError, SensorError) as exc:
        print(f"flowest: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, SnapshotFileError, OSError) as exc:
        print(f"flowest: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RankError, CalibrationError, EstimatorError, ObserverError, BlowUpError, SynthesisError,
            GridMismatchError, linalg.LinAlgError, ValueError) as exc:
        print(f"flowest: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
