"""Shared plumbing for the experiment scripts."""

import argparse
from pathlib import Path

from coexplore import cli
from coexplore.surrogate import Estimator

ROOT = Path(__file__).resolve().parent.parent


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    p.add_argument("--estimator", default=str(ROOT / ".cache" / "est-n50000-e200-s0.json"),
                   help="pretrained estimator (see README for how to produce one)")
    p.add_argument("--out", default=str(ROOT / "results"))
    return p


def setup(args):
    cfg = cli.load_config(args.config)
    est = Estimator.load(args.estimator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, est, out
