"""Noisy-regime comparison: exact MPC against DD-OPF over a grid of
regularization weights and noise seeds.

Usage: python scripts/lambda_sweep.py [--case case6] [--seeds 5] [--price-slack]
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace

import numpy as np

from ddopf.simloop import ExperimentConfig, add_measurement_noise, prepare_scenario, run_controller


def sweep(config: ExperimentConfig, lams, noise_seeds) -> dict:
    base = prepare_scenario(config)
    exact, _ = run_controller("exact", base, config)
    rows = []
    for ns in noise_seeds:
        noisy = add_measurement_noise(base.data, config.noise_ratio, ns, base.model.q)
        scen = replace(base, noisy=noisy)
        for lam in lams:
            m, _ = run_controller("ddopf", scen, replace(config, lam=lam))
            ratios = np.array(m.flow_ratio)
            rows.append({
                "noise_seed": ns,
                "lam": lam,
                "J_CL": m.J_CL,
                "excess": m.J_CL / exact.J_CL - 1.0,
                "steps_over_5pct": int(np.sum(ratios > 1.05)),
                "max_flow_ratio": float(ratios.max()),
            })
    mean_excess = {lam: float(np.mean([r["excess"] for r in rows if r["lam"] == lam])) for lam in lams}
    best = min(mean_excess, key=mean_excess.get)
    return {"exact_J_CL": exact.J_CL, "runs": rows, "mean_excess": mean_excess, "best_lam": best}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="case6")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=96)
    ap.add_argument("--price-slack", action="store_true")
    ap.add_argument("--lams", type=float, nargs="+", default=[10.0, 50.0, 200.0, 1000.0])
    args = ap.parse_args()
    cfg = ExperimentConfig(case=args.case, steps=args.steps, price_slack=args.price_slack, controllers=["exact", "ddopf"])
    t0 = time.perf_counter()
    res = sweep(cfg, args.lams, range(args.seeds))
    print(json.dumps({k: v for k, v in res.items() if k != "runs"}, indent=2))
    for r in res["runs"]:
        print(f"seed {r['noise_seed']} lam {r['lam']:>7g}  J_CL {r['J_CL']:.4f}  excess {100 * r['excess']:+.3f}%  "
              f"steps >5% over {r['steps_over_5pct']}  max ratio {r['max_flow_ratio']:.3f}")
    print(f"elapsed {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
