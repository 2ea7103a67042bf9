"""Command-line entry point.

Subcommands `fit`, `simulate`, `evaluate` and `export-params` orchestrate
ingestion, identification, switching simulation and metric reports with
reproducible seeds.  Flags override values from an optional JSON config
file (--config), which in turn overrides defaults.  Exit codes: 0 ok,
1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .analysis import (
    kl_pipeline,
    ol_interval_stats,
    parameter_matrix_rows,
    export_report,
    rmse_summary,
)
from .ctrlmath import DesignError
from .icore import IcParams, design_controller
from .ident import (
    IngestionError,
    build_bank,
    derive_kinematics,
    fit_2ol,
    fit_slice,
    load_recording,
    slice_recording,
    train_eval_split,
    write_fit_trace,
    write_fits_json,
)
from .plant import PlantSpec, build_plant
from .sim import (
    ModelBank,
    TargetSignal,
    make_target,
    run_ensemble,
    simulate_2ol,
    simulate_bank,
    trajectory_from_csv,
    trajectory_to_csv,
    write_ensemble,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DATA_DIR_ENV = "ICPOINTING_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def _config_hash(ns):
    blob = json.dumps({k: v for k, v in sorted(vars(ns).items())
                       if k != "func"}, default=str, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_manifest(out_dir, ns, extra=None):
    doc = {
        "version": __version__,
        "seed": getattr(ns, "seed", None),
        "config_hash": _config_hash(ns),
        "command": ns.command,
    }
    doc.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _column_map(ns):
    cm = {"time": ns.col_time, "target": ns.col_target, "pos": ns.col_pos}
    if ns.col_vel:
        cm["vel"] = ns.col_vel
    return cm


def _resolve_data(path):
    if os.path.exists(path):
        return path
    base = os.environ.get(DATA_DIR_ENV)
    if base:
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    raise IngestionError(f"data file not found: {path}")


def _fit_one(args):
    sl, rec, plant_spec, init, param_set, max_evals = args
    return fit_slice(sl, rec, plant_spec=plant_spec, init=init,
                     param_set=param_set, max_evals=max_evals)


def cmd_fit(ns):
    _require(ns, "data")
    rec = load_recording(_resolve_data(ns.data), column_map=_column_map(ns),
                         units=ns.units)
    rec = derive_kinematics(rec)
    slices = slice_recording(rec)
    train, _ = train_eval_split(slices)
    if not train:
        train = slices
    init = IcParams()
    plant_spec = PlantSpec()
    os.makedirs(ns.out, exist_ok=True)

    jobs = ns.jobs or os.cpu_count() or 1
    work = [(sl, rec, plant_spec, init, ns.set, ns.max_evals) for sl in train]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fits = list(pool.map(_fit_one, work))
    else:
        fits = [_fit_one(w) for w in work]
    fits.sort(key=lambda f: f.slice_id)

    n_params = 8 if ns.set == "full" else 4
    print(f"fitted {len(fits)} slices ({ns.set} set, {n_params} parameters)")
    print(f"{'slice':>6} {'cost':>12} {'evals':>6}")
    for f in fits:
        print(f"{f.slice_id:>6} {f.cost:>12.6g} {f.n_evals:>6}")

    bank = build_bank(fits, plant_spec=plant_spec)
    bank_path = os.path.join(ns.out, "bank.json")
    bank.to_json(bank_path)
    write_fits_json(fits, os.path.join(ns.out, "fits.json"))
    for f in fits:
        write_fit_trace(f, os.path.join(ns.out, f"trace_slice{f.slice_id:03d}.csv"))
    _write_manifest(ns.out, ns, {"n_slices": len(fits), "bank": "bank.json",
                                 "param_set": ns.set, "n_params": n_params})
    print(f"bank written to {bank_path}")
    return EXIT_OK


def _target_for_simulate(ns, bank):
    if ns.data:
        rec = load_recording(_resolve_data(ns.data), column_map=_column_map(ns),
                             units=ns.units)
        changes = rec.change_indices()
        times = tuple(float(rec.t[c] - rec.t[0]) for c in changes)
        levels = [float(rec.target[0])]
        levels += [float(rec.target[c]) for c in changes]
        return TargetSignal(change_times=times, levels=tuple(levels)), rec.dt
    cond = bank.condition
    if cond is None:
        from .sim import CONDITIONS

        cond = CONDITIONS[0]
    return make_target(cond, period=ns.period, n_changes=ns.changes), None


def cmd_simulate(ns):
    _require(ns, "bank")
    bank = ModelBank.from_json(_resolve_data(ns.bank))
    target, data_dt = _target_for_simulate(ns, bank)
    dt = ns.dt or data_dt or 0.001
    os.makedirs(ns.out, exist_ok=True)

    if ns.runs == 1:
        trajs = [simulate_bank(bank, target, dt, seed=ns.seed)]
    else:
        trajs = run_ensemble(bank, target, dt, n_runs=ns.runs, seed=ns.seed)
    write_ensemble(ns.out, trajs, {
        "version": __version__, "seed": ns.seed, "dt": dt,
        "n_runs": ns.runs, "config_hash": _config_hash(ns),
    })
    print(f"wrote {len(trajs)} trajectories to {ns.out}")

    if ns.baseline == "2ol":
        base = simulate_2ol(ns.omega, ns.zeta, target, dt)
        path = os.path.join(ns.out, "baseline_2ol.csv")
        trajectory_to_csv(base, path)
        print(f"baseline written to {path}")
    _write_manifest(ns.out, ns, {"n_runs": ns.runs, "dt": dt})
    return EXIT_OK


def cmd_evaluate(ns):
    _require(ns, "sim_dir", "data")
    data_rec = load_recording(_resolve_data(ns.data), column_map=_column_map(ns),
                              units=ns.units)
    data_rec = derive_kinematics(data_rec)
    from .ident import _slice_data, Slice

    data_traj = _slice_data(
        data_rec,
        Slice(slice_id=-1, start=0, end=data_rec.n_samples - 1,
              change_indices=()),
    )
    runs = []
    names = sorted(f for f in os.listdir(ns.sim_dir)
                   if f.startswith("run_") and f.endswith(".csv"))
    if not names:
        raise IngestionError(f"no run_*.csv files in {ns.sim_dir}")
    for name in names:
        runs.append(trajectory_from_csv(os.path.join(ns.sim_dir, name)))
    baseline = None
    if ns.baseline:
        baseline = trajectory_from_csv(_resolve_data(ns.baseline))

    os.makedirs(ns.out, exist_ok=True)
    report = kl_pipeline(runs, data_traj, baseline_traj=baseline,
                         participant=ns.participant)
    stats = ol_interval_stats(runs)
    summary = {
        "kl": report.to_dict(),
        "ol_intervals": {
            "n": stats.n,
            "min": stats.minimum,
            "median": stats.median,
            "tail_mass_beyond_0.25s": stats.tail_mass(0.25),
        },
    }
    if runs[0].n_samples == data_traj.n_samples:
        pos_rmse, vel_rmse = rmse_summary(runs[0], data_traj)
        summary["rmse_first_run"] = {"position": pos_rmse, "velocity": vel_rmse}
    with open(os.path.join(ns.out, "evaluation.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(json.dumps(summary["kl"], indent=2))
    _write_manifest(ns.out, ns, {"n_runs": len(runs)})
    return EXIT_OK


def cmd_export_params(ns):
    _require(ns, "bank")
    bank = ModelBank.from_json(_resolve_data(ns.bank))
    os.makedirs(ns.out, exist_ok=True)
    rows = []
    for e in bank.entries:
        rows.append({
            "k": [float(v) for v in e.controller.K],
            "q": e.params.q,
            "A_p": e.params.mismatch_gain,
            "participant": ns.participant,
            "ID": "" if bank.condition is None else bank.condition.id_nominal,
            "D": "" if bank.condition is None else bank.condition.distance_mm,
        })
    export_report(fits=rows, out_dir=ns.out,
                  manifest_extra={"seed": ns.seed, "config_hash": _config_hash(ns)})
    print(f"parameter matrix written to {os.path.join(ns.out, 'parameter_matrix.csv')}")
    return EXIT_OK


def _add_column_flags(p):
    p.add_argument("--col-time", default="t")
    p.add_argument("--col-target", default="w")
    p.add_argument("--col-pos", default="y")
    p.add_argument("--col-vel", default=None)
    p.add_argument("--units", choices=("m", "mm"), default="m")


def build_parser():
    parser = _Parser(prog="icpointing", description=__doc__)
    parser.add_argument("--config", default=None,
                        help="JSON file with default option values")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit controllers to a recorded block")
    p.add_argument("--data", default=None)
    p.add_argument("--set", choices=("full", "reduced"), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="fit_out")
    p.add_argument("--max-evals", type=int, default=1500)
    p.add_argument("--jobs", type=int, default=None)
    _add_column_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run switching simulations from a bank")
    p.add_argument("--bank", default=None)
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sim_out")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--data", default=None,
                   help="replay the target schedule of this recording")
    p.add_argument("--period", type=float, default=1.5)
    p.add_argument("--changes", type=int, default=8)
    p.add_argument("--baseline", choices=("2ol",), default=None)
    p.add_argument("--omega", type=float, default=12.0)
    p.add_argument("--zeta", type=float, default=0.8)
    _add_column_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="score simulations against data")
    p.add_argument("--sim-dir", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--baseline", default=None,
                   help="baseline trajectory CSV (e.g. the 2ol run)")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--participant", default="")
    p.add_argument("--seed", type=int, default=0)
    _add_column_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-params", help="UMAP-ready parameter matrix")
    p.add_argument("--bank", default=None)
    p.add_argument("--out", default="params_out")
    p.add_argument("--participant", default="")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_params)
    return parser


def _apply_config(ns, argv):
    """CLI flags override config-file values, which override defaults."""
    if getattr(ns, "config", None):
        with open(ns.config) as fh:
            overrides = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        given = {tok[2:].split("=")[0].replace("-", "_")
                 for tok in argv if tok.startswith("--")}
        for key, val in overrides.items():
            if key not in given and hasattr(ns, key):
                setattr(ns, key, val)
    return ns


def _require(ns, *names):
    for name in names:
        if getattr(ns, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        ns = _apply_config(parser.parse_args(argv), argv)
        return ns.func(ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except IngestionError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DesignError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
