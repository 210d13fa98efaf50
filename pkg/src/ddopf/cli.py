"""Command-line entry point: ``ddopf {convert,check,simulate,identify}``.

Exit codes: 0 success, 1 other package errors, 2 usage or input errors,
3 disconnected grid, 4 infeasible schedule under the abort policy,
5 persistency failure in strict mode.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import case_io
from .controllers import regression_equivalence_check, seqid_estimate_ptdf
from .errors import (
    ConnectivityError,
    DdopfError,
    InfeasibleScheduleError,
    ParseError,
    PersistencyError,
)
from .hankel import behavior_dimension, min_data_length, simplified_rows
from .netmodel import component_lists, reduce
from .plant import assemble_descriptor, load_trajectory_csv, r_controllable, r_observable, save_trajectory_csv
from .simloop import ExperimentConfig, metrics_summary, prepare_scenario, run_controller

log = logging.getLogger("ddopf")

EXIT_ERROR, EXIT_INPUT, EXIT_DISCONNECTED, EXIT_INFEASIBLE, EXIT_PE = 1, 2, 3, 4, 5


def _setup_logging() -> None:
    level = os.environ.get("DDOPF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def write_ptdf_csv(M: np.ndarray, bus_ids, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["branch"] + [f"bus_{b}" for b in bus_ids])
        for i, row in enumerate(M):
            wr.writerow([i + 1] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# subcommands


def cmd_convert(args) -> int:
    raw = case_io.read_matpower(args.matpower)
    aug = case_io.load_augmentation(args.augmentation) if args.augmentation else case_io.StorageAugmentation()
    slack = int(args.slack) if args.slack and args.slack.isdigit() else (args.slack or "first_gen")
    case = case_io.to_grid_case(raw, aug, slack_policy=slack)
    case_io.save_case_json(case, args.out)
    print(
        f"wrote {args.out}: {len(case.generators) + len(case.storages)} generators "
        f"(incl. {len(case.storages)} storages), {len(case.branches)} branches, {len(case.demands)} demands"
    )
    return 0


def cmd_check(args) -> int:
    case = case_io.load_case(args.case)
    comps = component_lists(case)
    print(f"buses: {len(case.buses)}  branches: {len(case.branches)}  components: {len(comps)}")
    if len(comps) != 1:
        for comp in comps:
            print("  component: " + ", ".join(map(str, comp)))
        print("grid is not connected", file=sys.stderr)
        return EXIT_DISCONNECTED
    model = reduce(case)
    sys_ = assemble_descriptor(model)
    q, n_u, n_w, n_y = model.q, model.n_u, model.n_w, model.n_y
    s = sys_.nilpotency_index
    L, t_ini = args.horizon, args.tini
    print(f"R-controllable: {r_controllable(sys_)}  R-observable: {r_observable(sys_)}")
    print(f"n_u = {n_u}  n_w = {n_w}  n_y = {n_y}  q = {q}  s = {s}")
    if q == 0:
        print("no storage: q = 0, T_ini = 0 suffices (static model)")
    else:
        print(f"T_ini options: >= {q} for the full lemma bound, 1 with the storage-only past")
    print(f"minimum T (strict, L = {L}): {min_data_length(n_u, n_w, q, s, L)}")
    print(f"minimum T (strict, segmented L = 1): {min_data_length(n_u, n_w, q, s, 1)}")
    print("minimum T (truncated): no bound enforced")
    print(f"behavior dimension (T_ini = {t_ini}): {behavior_dimension(n_u, n_w, q, t_ini)}")
    print(f"segmented stack rows per segment: {simplified_rows(n_u, n_w, n_y, q, t_ini, 1)}")
    return 0


_FLAG_FIELDS = {
    "case": "case",
    "seed": "seed",
    "pe": "pe_policy",
    "tini": "t_ini",
    "lam": "lam",
    "noise": "noise_ratio",
    "horizon": "horizon",
    "control_horizon": "control_horizon",
    "steps": "steps",
    "data_length": "data_length",
}


def resolve_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for flag, name in _FLAG_FIELDS.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[name] = val
    if getattr(args, "controller", None):
        data["controllers"] = list(ExperimentConfig().controllers) if args.controller == "all" else [args.controller]
    if getattr(args, "no_timing", False):
        data["record_timing"] = False
    return ExperimentConfig.from_dict(data)


def cmd_simulate(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    scen = prepare_scenario(config)
    save_trajectory_csv(scen.noisy, out / "data.csv")
    results = {}
    rows = []
    for kind in config.controllers:
        try:
            metrics, _ = run_controller(kind, scen, config)
        except InfeasibleScheduleError as exc:
            print(f"{kind}: infeasible schedule: {exc}", file=sys.stderr)
            if exc.violated:
                print("violated: " + ", ".join(exc.violated[:20]), file=sys.stderr)
            return EXIT_INFEASIBLE
        results[kind] = metrics
        rows += metrics.result_rows(config.record_timing)
    case_io.save_results_csv(rows, out / "results.csv")
    summary = metrics_summary(results, config.record_timing)
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if "seqid" in config.controllers:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = seqid_estimate_ptdf(scen.noisy, scen.model)
        write_ptdf_csv(est.M_hat, scen.model.reduced_bus_ids, out / "ptdf.csv")
    print(f"{'controller':<10} {'J_CL':>16} {'median_s':>10} {'violations':>10}")
    for kind, s in summary.items():
        med = "-" if s["median_solve_s"] is None else f"{s['median_solve_s']:.4f}"
        print(f"{kind:<10} {s['J_CL']:>16.6f} {med:>10} {s['violations']:>10}")
    return 0


def cmd_identify(args) -> int:
    case = case_io.load_case(args.case)
    model = reduce(case)
    data = load_trajectory_csv(args.data)
    if data.u.shape[1] != model.n_u or data.w.shape[1] != model.n_w or data.y.shape[1] != model.n_y:
        print(
            f"data dimensions u:{data.u.shape[1]} w:{data.w.shape[1]} y:{data.y.shape[1]} do not match the case "
            f"(n_u={model.n_u}, n_w={model.n_w}, n_y={model.n_y})",
            file=sys.stderr,
        )
        return EXIT_INPUT
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = seqid_estimate_ptdf(data, model)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    rep = regression_equivalence_check(data, model.Cg_red, model.Cd_red, model.q)
    err = float(np.abs(est.M_hat - model.ptdf).max()) if est.M_hat.size else 0.0
    report = {
        "rank_injections": est.rank,
        "deficient_directions": est.deficient,
        "zero_injection_buses": list(est.zero_buses),
        "ptdf_max_error": err,
        "equivalence_deviation": rep.deviation,
        "equivalence_deviation_projected": rep.projected_deviation,
    }
    print(f"rank of injections: {est.rank} of {model.B_red.shape[0]}")
    print(f"max |M_hat - M|: {err:.3e}")
    print(f"equivalence deviation: {rep.deviation:.3e} (on the data span: {rep.projected_deviation:.3e})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_ptdf_csv(est.M_hat, model.reduced_bus_ids, out / "ptdf.csv")
        with open(out / "identify.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddopf", description="Multi-stage DC OPF with storage: model-based and data-driven control.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="MATPOWER case + storage augmentation -> case JSON")
    c.add_argument("matpower")
    c.add_argument("augmentation", nargs="?")
    c.add_argument("--out", required=True)
    c.add_argument("--slack", help="first_gen, ref_bus or a bus id")
    c.set_defaults(func=cmd_convert)

    k = sub.add_parser("check", help="connectivity, structural properties and data requirements")
    k.add_argument("case", help="case JSON path or builtin name")
    k.add_argument("--horizon", type=int, default=12)
    k.add_argument("--tini", type=int, default=1)
    k.set_defaults(func=cmd_check)

    s = sub.add_parser("simulate", help="excitation, noise, closed loop and metrics")
    s.add_argument("--config")
    s.add_argument("--case")
    s.add_argument("--controller", choices=["exact", "seqid", "ddopf", "all"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="out")
    s.add_argument("--pe", choices=["strict", "truncated"])
    s.add_argument("--tini", type=int)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--horizon", type=int)
    s.add_argument("--control-horizon", dest="control_horizon", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--data-length", dest="data_length", type=int)
    s.add_argument("--no-timing", dest="no_timing", action="store_true",
                   help="leave wall-clock times out of the outputs (byte-reproducible files)")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("identify", help="least-squares PTDF and the regression equivalence check")
    i.add_argument("case")
    i.add_argument("data", help="trajectory CSV as written by simulate (data.csv)")
    i.add_argument("--out")
    i.set_defaults(func=cmd_identify)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConnectivityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DISCONNECTED
    except InfeasibleScheduleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PersistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PE
    except (ParseError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DdopfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
