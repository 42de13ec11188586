"""Searches needed to land a latency target in [T/2, T]: hard constraint vs tuned baselines.

The baselines repeat whole searches while doubling or bisecting their
control parameter (soft-penalty weight, or the cost weight); the
hard-constrained search runs once. NAS-then-hardware is reported too.
"""

import json
from dataclasses import replace

import numpy as np

from coexplore.constrainer import ConstraintSpec
from coexplore.explorer import autotune, nas_then_hw

from _common import parser, setup


def main():
    p = parser(__doc__)
    p.add_argument("--target", type=float, required=True, help="latency target in ms")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--soft-lambda", type=float, default=1.0)
    args = p.parse_args()
    cfg, est, out = setup(args)
    spec = ConstraintSpec("latency_ms", args.target, cfg.delta0, cfg.delta0, cfg.p)
    base = replace(cfg.search_config(), soft_lambda=args.soft_lambda)
    table = {}
    for mode in ("hdx", "soft", "unconstrained"):
        results = [autotune(base, est, spec, seed=t, mode=mode) for t in range(args.trials)]
        table[mode] = {"searches": [r.search_count for r in results],
                       "success": [r.success for r in results],
                       "latency": [r.solution.oracle_metrics.latency_ms for r in results]}
        print(f"{mode:13s} mean searches {np.mean(table[mode]['searches']):.1f}, "
              f"in window {sum(table[mode]['success'])}/{args.trials}")
    staged = [nas_then_hw(replace(base, constraints=(spec,)), t, est) for t in range(args.trials)]
    table["nas-then-hw"] = {"satisfied": [s.in_constraint for s in staged],
                            "dataflow": [s.hw.dataflow for s in staged],
                            "val_error": [s.val_error for s in staged]}
    print(f"nas-then-hw   satisfied {sum(table['nas-then-hw']['satisfied'])}/{args.trials}")
    (out / "compare_baselines.json").write_text(json.dumps(table, indent=1) + "\n")


if __name__ == "__main__":
    main()
