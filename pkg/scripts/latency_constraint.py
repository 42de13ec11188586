"""Hard latency constraint at 0.6x the median unconstrained latency, over many seeds.

Writes each run's trajectory and solution under ``<out>/latency/`` and a
summary JSON with the satisfaction counts.
"""

import json
from dataclasses import replace

import numpy as np

from coexplore.constrainer import ConstraintSpec
from coexplore.explorer import run_search

from _common import parser, setup


def main():
    p = parser(__doc__)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--factor", type=float, default=0.6)
    args = p.parse_args()
    cfg, est, out = setup(args)
    base = cfg.search_config()
    free = [run_search(replace(base, mode="unconstrained"), est, 100 + s) for s in range(5)]
    T = args.factor * float(np.median([s.oracle_metrics.latency_ms for s in free]))
    spec = ConstraintSpec("latency_ms", T, cfg.delta0, cfg.delta0, cfg.p)
    lat = []
    for seed in range(args.runs):
        sol = run_search(replace(base, constraints=(spec,)), est, seed, out / "latency" / f"seed{seed}")
        lat.append(sol.oracle_metrics.latency_ms)
        print(f"seed {seed}: latency {lat[-1]:.4f} ms ({lat[-1] / T:.2f} T), error {sol.val_error:.3f}")
    lat = np.array(lat)
    summary = {"target": T, "latency": lat.tolist(), "satisfied": int(np.sum(lat <= T)),
               "in_window": int(np.sum((lat >= T / 2) & (lat <= T))), "runs": args.runs}
    (out / "latency_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
