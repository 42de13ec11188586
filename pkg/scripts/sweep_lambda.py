"""Unconstrained searches over a grid of lambda_cost values, several seeds each.

Shows how loosely the cost weight controls the resulting latency.
"""

import csv

import numpy as np

from coexplore.cli import _parse_lambdas
from coexplore.explorer import sweep_lambda

from _common import parser, setup


def main():
    p = parser(__doc__)
    p.add_argument("--lambdas", default="0.001:0.010:0.001")
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args()
    cfg, est, out = setup(args)
    rows = sweep_lambda(cfg.search_config("", "unconstrained"), est, _parse_lambdas(args.lambdas),
                        list(range(args.seeds)))
    path = out / "sweep_lambda.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for lam in sorted({r["lambda"] for r in rows}):
        lat = [r["latency_ms"] for r in rows if r["lambda"] == lam]
        print(f"lambda {lam:.3f}: latency mean {np.mean(lat):.4f} ms, spread {min(lat):.4f}-{max(lat):.4f}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
