"""Command-line pipeline: collect, fit, validate, track, compare.

Every subcommand reads one experiment config, writes its artifacts under
the output directory, and drops a manifest that is sufficient to re-run
it. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, nmpc, sindy
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, DataError, DivergedSimulation,
                     InfeasibleStart, RankDeficient, SingularAttitude)
from .sim import read_snapshots, run_data_collection, write_snapshots

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, extra: dict):
    doc = {
        "command": command,
        "config": cfg.path,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "package_version": __version__,
    }
    doc.update(extra)
    with open(out_dir / f"{command}_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _nominal_params(cfg: ExperimentConfig):
    """Prediction parameters of the payload-unaware baseline: airframe mass
    and inertia only, no aerodynamics, no rotor gyroscopics."""
    return replace(cfg.plant, m_p=0.0, i_p=(0.0, 0.0, 0.0),
                   k_f=(0.0, 0.0, 0.0), k_m=(0.0, 0.0, 0.0), j_r=0.0)


def _resolve_model(spec: str, cfg: ExperimentConfig) -> sindy.SindyDynamics:
    if spec == "nominal":
        model = sindy.model_from_params(_nominal_params(cfg), include_aero=False,
                                        include_gyro=False)
    else:
        model = sindy.load_model(spec)
    return sindy.assemble_model(model)


def cmd_collect(cfg: ExperimentConfig, out_dir: Path) -> int:
    t0 = time.perf_counter()
    snap = run_data_collection(cfg.plant, cfg.sim, cfg.trajectory, cfg.pid)
    csv_path = out_dir / "snapshots.csv"
    write_snapshots(snap, csv_path)
    _write_manifest(out_dir, "collect", cfg, {
        "rows": snap.rows, "output": str(csv_path),
        "wall_time_s": time.perf_counter() - t0,
    })
    print(f"collect: {snap.rows} rows -> {csv_path}")
    return EXIT_OK


def _recovery_table(true_sigma, est_sigma, names, columns) -> str:
    lines = []
    head = f"{'term':<12}"
    for c in columns:
        head += f"{'true_' + c:>12}{'est_' + c:>12}{'err_%':>9}"
    lines.append(head)
    for i, name in enumerate(names):
        row = f"{name:<12}"
        for j in range(len(columns)):
            tv, ev = true_sigma[i, j], est_sigma[i, j]
            if tv != 0.0:
                pct = f"{100.0 * (ev - tv) / tv:>9.3f}"
            else:
                pct = f"{'-':>9}"
            row += f"{tv:>12.5g}{ev:>12.5g}{pct}"
        lines.append(row)
    return "\n".join(lines)


def write_recovery_report(model: sindy.SparseModel, truth: sindy.SparseModel,
                          path: Path) -> None:
    """True-versus-identified coefficient tables for both blocks."""
    text = ["translational block",
            _recovery_table(truth.sigma_tr, model.sigma_tr,
                            model.tr_spec.names, ("xd", "yd", "zd")),
            "", "rotational block",
            _recovery_table(truth.sigma_ro, model.sigma_ro,
                            model.ro_spec.names, ("p", "q", "r")),
            "", "note: the roll-axis q*r coupling follows the standard "
            "rigid-body sign, (i_yy - i_zz) / i_xx, which is negative "
            "for this inertia set."]
    path.write_text("\n".join(text) + "\n", encoding="utf-8")


def cmd_fit(cfg: ExperimentConfig, out_dir: Path, data: str) -> int:
    t0 = time.perf_counter()
    snap = read_snapshots(data)
    holdout = int(cfg.sindy["holdout_rows"])
    train = snap.slice(0, snap.rows - holdout) if holdout > 0 else snap
    train = sindy.estimate_derivatives(train)
    model = sindy.fit_model(train, cfg.plant, threshold=cfg.sindy["threshold"],
                            max_iters=cfg.sindy["max_iters"],
                            include_gyro=cfg.sindy["include_gyro"])
    model_path = out_dir / "model.json"
    sindy.save_model(model, model_path)
    truth = sindy.model_from_params(cfg.plant,
                                    include_gyro=cfg.sindy["include_gyro"])
    report_path = out_dir / "recovery_report.txt"
    write_recovery_report(model, truth, report_path)
    _write_manifest(out_dir, "fit", cfg, {
        "data": str(data), "rows": train.rows, "model": str(model_path),
        "recovery_report": str(report_path),
        "wall_time_s": time.perf_counter() - t0,
    })
    print(f"fit: {train.rows} rows -> {model_path}")
    print(report_path.read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig, out_dir: Path, data: str, model_spec: str) -> int:
    snap = read_snapshots(data)
    dyn = _resolve_model(model_spec, cfg)
    report = sindy.one_step_validate(dyn, snap)
    csv_path = out_dir / "validation.csv"
    sindy.write_validation_csv(report, csv_path)
    text_path = out_dir / "validation.txt"
    text_path.write_text(report.to_text() + "\n", encoding="utf-8")
    _write_manifest(out_dir, "validate", cfg, {
        "data": str(data), "model": model_spec,
        "rmse": dict(zip(report.channels, report.rmse.tolist())),
        "signal_std": dict(zip(report.channels, report.signal_std.tolist())),
    })
    print(report.to_text())
    return EXIT_OK


def _track_once(cfg: ExperimentConfig, model_spec: str):
    dyn = _resolve_model(model_spec, cfg)
    return nmpc.run_closed_loop(cfg.plant, dyn, cfg.mpc, cfg.trajectory, cfg.sim)


def _run_fragment(log: nmpc.FlightLog, label: str) -> dict:
    mean_t, max_t = log.solve_time_stats()
    return {
        "label": label,
        "rmse_x": log.rmse[0], "rmse_y": log.rmse[1], "rmse_z": log.rmse[2],
        "min_obstacle_margin_m": log.min_margin,
        "solve_time_mean_s": mean_t, "solve_time_max_s": max_t,
        "saturated_steps": log.saturated_steps,
        "all_solves_converged": log.converged_all,
    }


def _fragment_text(frag: dict) -> str:
    return (f"{frag['label']}: rmse x/y/z = {frag['rmse_x']:.4f} / "
            f"{frag['rmse_y']:.4f} / {frag['rmse_z']:.4f} m, "
            f"min margin = {frag['min_obstacle_margin_m']:.4f} m, "
            f"solve time mean/max = {1e3 * frag['solve_time_mean_s']:.2f} / "
            f"{1e3 * frag['solve_time_max_s']:.2f} ms")


def cmd_track(cfg: ExperimentConfig, out_dir: Path, model_spec: str) -> int:
    label = "nominal" if model_spec == "nominal" else "model"
    log = _track_once(cfg, model_spec)
    log_path = out_dir / f"flight_{label}.csv"
    nmpc.write_flight_log(log, log_path)
    frag = _run_fragment(log, label)
    frag_path = out_dir / f"track_{label}.json"
    with open(frag_path, "w", encoding="utf-8") as fh:
        json.dump(frag, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, f"track_{label}", cfg, {
        "model": model_spec, "flight_log": str(log_path), "fragment": str(frag_path),
    })
    print(_fragment_text(frag))
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out_dir: Path, model_spec: str) -> int:
    """Track with the identified model and the nominal baseline on the same
    scenario, then merge the report."""
    if model_spec == "nominal":
        raise ConfigError("compare needs an identified model via --model")
    frag_m = _run_fragment(_track_once(cfg, model_spec), "sindy")
    frag_n = _run_fragment(_track_once(cfg, "nominal"), "nominal")

    ref_margin = nmpc.reference_min_margin(cfg.trajectory, cfg.obstacles,
                                           cfg.sim.duration)
    z_gain = 1.0 - frag_m["rmse_z"] / frag_n["rmse_z"] if frag_n["rmse_z"] > 0 else 0.0
    checks = {
        "model_beats_nominal_all_axes": all(
            frag_m[f"rmse_{a}"] < frag_n[f"rmse_{a}"] for a in "xyz"),
        "z_axis_improvement": z_gain,
        "z_axis_improvement_exceeds_20pct": z_gain > 0.20,
        "margins_within_tolerance": all(
            f["min_obstacle_margin_m"] >= -cfg.mpc.delta_obs for f in (frag_m, frag_n)),
        "reference_penetrates_obstacle": ref_margin < 0.0,
        "max_solve_time_below_period": max(
            frag_m["solve_time_max_s"], frag_n["solve_time_max_s"]) < cfg.mpc.dt,
    }
    report = {"runs": [frag_m, frag_n],
              "reference_min_margin_m": ref_margin,
              "checks": checks}
    report_path = out_dir / "comparison.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = [_fragment_text(frag_m), _fragment_text(frag_n),
             f"reference min margin: {ref_margin:.4f} m"]
    for key, val in checks.items():
        if isinstance(val, bool):
            lines.append(f"{key}: {'pass' if val else 'FAIL'}")
        else:
            lines.append(f"{key}: {val:.4f}")
    text = "\n".join(lines)
    (out_dir / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    _write_manifest(out_dir, "compare", cfg, {
        "model": model_spec, "report": str(report_path),
    })
    print(text)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sindympc",
        description="multirotor identification and predictive-control pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, data=False, model=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if data:
            p.add_argument("--data", required=True, help="snapshot CSV")
        if model:
            p.add_argument("--model", required=True,
                           help="model file path or 'nominal'")
        return p

    add("collect", "fly the data-collection mission and log snapshots")
    add("fit", "identify a sparse model from a snapshot CSV", data=True)
    add("validate", "score one-step predictions on a snapshot CSV",
        data=True, model=True)
    add("track", "closed-loop tracking with the chosen prediction model",
        model=True)
    add("compare", "track with the identified model and the nominal baseline",
        model=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.sim.seed = args.seed
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "collect":
            return cmd_collect(cfg, out_dir)
        if args.command == "fit":
            return cmd_fit(cfg, out_dir, args.data)
        if args.command == "validate":
            return cmd_validate(cfg, out_dir, args.data, args.model)
        if args.command == "track":
            return cmd_track(cfg, out_dir, args.model)
        if args.command == "compare":
            return cmd_compare(cfg, out_dir, args.model)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RankDeficient, DivergedSimulation, InfeasibleStart,
            SingularAttitude) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
