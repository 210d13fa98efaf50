"""Run the three controllers on one shared scenario and print a comparison.

Usage: python scripts/full_day_protocol.py [config.json] [--out DIR]

Defaults to ``configs/ieee118_protocol.json`` next to this script (118-bus,
L = 12, L_c = 1, 96 steps, T = 417, lambda = 200, 1% flow noise). Expect
several minutes on one core.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from ddopf.case_io import save_results_csv
from ddopf.simloop import ExperimentConfig, metrics_summary, prepare_scenario, run_controller

HERE = Path(__file__).resolve().parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default=str(HERE / "configs" / "ieee118_protocol.json"))
    ap.add_argument("--out", help="directory for results.csv and metrics.json")
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config)

    t0 = time.perf_counter()
    scen = prepare_scenario(cfg)
    pe = scen.data.meta["pe"]
    print(f"scenario ready in {time.perf_counter() - t0:.1f} s; "
          f"(u, w) rank {pe['rank']} of {pe['required_rank']}, strict bound T >= {pe['T_min']}")

    results, rows = {}, []
    for kind in cfg.controllers:
        t1 = time.perf_counter()
        metrics, _ = run_controller(kind, scen, cfg)
        results[kind] = metrics
        rows += metrics.result_rows()
        print(f"{kind} finished in {time.perf_counter() - t1:.1f} s")

    summary = metrics_summary(results)
    ref = summary.get("exact", {}).get("J_CL")
    print(f"\n{'controller':<10} {'J_CL':>14} {'vs exact':>9} {'median s':>9} {'flow viol.':>10} {'max |f|/f_max':>13}")
    for kind, s in summary.items():
        rel = f"{100 * (s['J_CL'] / ref - 1):+.2f}%" if ref else "-"
        print(f"{kind:<10} {s['J_CL']:>14.2f} {rel:>9} {s['median_solve_s']:>9.3f} "
              f"{s['flow_violation_steps']:>10} {s['max_flow_ratio']:>13.3f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_results_csv(rows, out / "results.csv")
        (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
