"""Constrain all three metrics at the values of one unconstrained anchor solution.

Reports, per seed, whether all constraints hold and how the final global
loss compares with the anchor's.
"""

import json
from dataclasses import replace

from coexplore.constrainer import ConstraintSpec
from coexplore.explorer import run_search
from coexplore.hwmodel import METRIC_NAMES

from _common import parser, setup


def main():
    p = parser(__doc__)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--anchor-seed", type=int, default=100)
    args = p.parse_args()
    cfg, est, out = setup(args)
    base = cfg.search_config()
    anchor = run_search(replace(base, mode="unconstrained"), est, args.anchor_seed)
    specs = tuple(ConstraintSpec(m, anchor.oracle_metrics[m], cfg.delta0, cfg.delta0, cfg.p)
                  for m in METRIC_NAMES)
    print(f"anchor: loss {anchor.final_loss:.4f}, {anchor.oracle_metrics}")
    rows = []
    for seed in range(args.runs):
        sol = run_search(replace(base, constraints=specs), est, seed, out / "multi" / f"seed{seed}")
        rel = sol.final_loss / anchor.final_loss - 1
        rows.append({"seed": seed, "satisfied": sol.satisfied, "loss": sol.final_loss, "rel_loss": rel})
        print(f"seed {seed}: satisfied {sol.satisfied}, loss {sol.final_loss:.4f} ({rel:+.1%})")
    (out / "multi_constraint.json").write_text(
        json.dumps({"anchor": anchor.to_json(), "runs": rows}, indent=1) + "\n")


if __name__ == "__main__":
    main()
