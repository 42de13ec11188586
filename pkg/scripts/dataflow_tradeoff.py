"""Best latency and best energy per dataflow over the full hardware grid.

Uses only the analytic model, so it needs no estimator.
"""

import argparse

from coexplore import hwmodel as hm


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--arch", default="0,1,2,3,4,5,0,1", help="candidate index per block")
    args = p.parse_args()
    choices = [hm.CANDIDATES[int(c)] for c in args.arch.split(",")]
    layers = hm.mbconv_expand(choices)
    results = [(hm.evaluate(layers, hw), hw) for hw in hm.enumerate_space()]
    print(f"network {choices}")
    for df in hm.DATAFLOWS:
        sub = [r for r in results if r[1].dataflow == df]
        lat = min(sub, key=lambda r: r[0].latency_ms)
        en = min(sub, key=lambda r: r[0].energy_mJ)
        print(f"{df}: min latency {lat[0].latency_ms:.4f} ms at {lat[1]}, "
              f"min energy {en[0].energy_mJ:.5f} mJ at {en[1]}")


if __name__ == "__main__":
    main()
