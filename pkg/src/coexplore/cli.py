"""Command-line entry point.

Exit codes: 0 success, 1 search finished but a constraint is not met,
2 usage or configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import hwmodel as hm
from .constrainer import DEFAULT_DELTA0, DEFAULT_P, ConstraintError, parse_constraints
from .explorer import (MODES, SearchConfig, SearchError, autotune, run_mode, sweep_lambda)
from .hwmodel import METRIC_NAMES, CostConfig
from .surrogate import Estimator, pretrain_estimator

log = logging.getLogger("coexplore")

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class IOFailure(RuntimeError):
    pass


# -- run configuration ------------------------------------------------------

_SEARCH_KEYS = {f.name for f in fields(SearchConfig)} - {"cost", "constraints", "mode", "n_layers",
                                                          "task_seed"}


@dataclass
class RunConfig:
    """Everything a run needs besides per-invocation flags; loaded from JSON."""

    layers: int = 8
    task_seed: int = 0
    dataset_seed: int = 0
    search: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    constraints: str | None = None
    delta0: float = DEFAULT_DELTA0
    p: float = DEFAULT_P
    estimator: str | None = None
    dataset: str | None = None

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(doc, {f.name for f in fields(cls)}, "config")
        _reject_unknown(doc.get("search", {}), _SEARCH_KEYS, "search")
        _reject_unknown(doc.get("cost", {}), {"c_energy", "c_latency", "c_area"}, "cost")
        cfg = cls(**doc)
        cfg.search_config()  # validates eagerly
        return cfg

    def constraint_specs(self, text: str | None = None):
        text = text if text is not None else self.constraints
        return tuple(parse_constraints(text, self.delta0, self.p)) if text else ()

    def search_config(self, constraints: str | None = None, mode: str = "hdx") -> SearchConfig:
        try:
            if not (isinstance(self.layers, int) and self.layers >= 1):
                raise ConfigError(f"layers must be a positive integer, got {self.layers!r}")
            return SearchConfig(cost=CostConfig(**self.cost), constraints=self.constraint_specs(constraints),
                                mode=mode, n_layers=self.layers, task_seed=self.task_seed, **self.search)
        except ConstraintError as exc:
            raise ConfigError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def _reject_unknown(doc, allowed: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.from_json(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _load_estimator(path: str | None) -> Estimator:
    if path is None:
        raise ConfigError("an estimator file is required (--estimator or config 'estimator')")
    try:
        return Estimator.load(path)
    except OSError as exc:
        raise IOFailure(f"cannot read estimator {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid estimator file {path}: {exc}") from exc


def _atomic_write(path: str | Path, text: str) -> None:
    """Write through a temporary sibling so a failure never leaves a partial file."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _sidecar(out_dir: Path, argv: list[str]) -> None:
    # timestamps stay out of the seeded artifacts
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {' '.join(argv)}\n")


def _parse_lambdas(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            a, b, step = (float(x) for x in text.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            n = int(np.floor((b - a) / step + 1e-9)) + 1
            return [round(a + i * step, 12) for i in range(n)]
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse lambda grid {text!r}; use a:b:step or a,b,c") from None


# -- commands ---------------------------------------------------------------

def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    records = hm.sample_pairs(args.n, args.seed, cfg.layers)
    buf = io.StringIO()
    hm.write_jsonl(records, buf)
    _atomic_write(args.out, buf.getvalue())
    print(json.dumps({"n": args.n, "seed": args.seed, "refs": hm.metric_means(records)}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    try:
        records = hm.read_jsonl(args.dataset)
    except OSError as exc:
        raise IOFailure(f"cannot read dataset {args.dataset}: {exc}") from exc
    except hm.DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    if not records:
        raise ConfigError(f"{args.dataset}: empty dataset")
    try:
        est, report = pretrain_estimator(records, epochs=args.epochs, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with tempfile.TemporaryDirectory() as tmp:
        est.save(Path(tmp) / "m.json")
        _atomic_write(args.out, (Path(tmp) / "m.json").read_text())
    print(json.dumps(report.to_json()))
    return EXIT_OK


def _search_one(job) -> dict:
    cfg, est_path, seed, mode, out_dir, threads = job
    with threadpool_limits(threads):
        est = None if est_path is None else Estimator.load(est_path)
        sol = run_mode(cfg, est, seed, mode, out_dir)
    return sol.to_json() | {"in_constraint": sol.in_constraint}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HDX_THREADS", "1")))
    except ValueError:
        raise ConfigError("HDX_THREADS must be an integer") from None


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    if args.mode == "unconstrained" and args.constraints:
        raise ConfigError("--mode unconstrained contradicts --constraints")
    constraints = args.constraints
    if args.mode == "unconstrained":
        constraints = ""
    scfg = cfg.search_config(constraints, "hdx" if args.mode == "nas-then-hw" else args.mode)
    if args.mode == "soft" and scfg.soft_lambda <= 0:
        raise ConfigError("soft mode needs search.soft_lambda > 0 in the config")
    est_path = args.estimator or cfg.estimator
    _load_estimator(est_path)  # fail fast before any training
    seeds = [args.seed + i for i in range(args.seeds)]
    out = Path(args.out)
    dirs = [out] if len(seeds) == 1 else [out / f"seed-{s:04d}" for s in seeds]
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc}") from exc
    _sidecar(out, sys.argv)
    jobs = [(scfg, est_path, s, args.mode, d, _threads()) for s, d in zip(seeds, dirs)]
    try:
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_search_one, jobs))
        else:
            results = [_search_one(j) for j in jobs]
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    status = EXIT_OK
    for seed, res in zip(seeds, results):
        verdict = ", ".join(f"{m} {'in' if ok else 'OUT'}" for m, ok in res["satisfied"].items())
        overall = "in-constraint" if res["in_constraint"] else "out-of-constraint"
        oracle = " ".join(f"{k}={res['oracle'][k]:.6g}" for k in METRIC_NAMES)
        print(f"seed {seed}: {overall}" + (f" ({verdict})" if verdict else "") + f" | {oracle}")
        if not res["in_constraint"]:
            status = EXIT_INFEASIBLE
    return status


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    lambdas = _parse_lambdas(args.lambdas)
    seeds = [int(s) for s in args.seeds.split(",")]
    est = _load_estimator(args.estimator or cfg.estimator)
    scfg = cfg.search_config("", "unconstrained")
    with threadpool_limits(_threads()):
        rows = sweep_lambda(scfg, est, lambdas, seeds)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
    if args.out:
        _atomic_write(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_autotune(args) -> int:
    cfg = load_config(args.config)
    specs = cfg.constraint_specs(args.constraints) if args.constraints else cfg.constraint_specs()
    if len(specs) != 1:
        raise ConfigError("autotune needs exactly one constraint")
    est = _load_estimator(args.estimator or cfg.estimator)
    scfg = cfg.search_config("", "unconstrained")
    try:
        with threadpool_limits(_threads()):
            result = autotune(scfg, est, specs[0], args.seed, mode=args.mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    text = json.dumps(result.to_json(), indent=1) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"autotune: {result.search_count} search(es), "
          f"{'in window' if result.success else 'tuning failed'}", file=sys.stderr)
    return EXIT_OK if result.success else EXIT_INFEASIBLE


def summarize(solutions: list[dict]) -> dict:
    """Aggregate solution documents: metric mean/min/max and satisfaction rate."""
    if not solutions:
        raise ConfigError("no solution.json files found")
    out = {"runs": len(solutions),
           "satisfaction_rate": sum(all(s["satisfied"].values()) for s in solutions) / len(solutions)}
    for key in METRIC_NAMES:
        vals = [s["oracle"][key] for s in solutions]
        out[key] = {"mean": float(np.mean(vals)), "min": min(vals), "max": max(vals)}
    errs = [s["val_error"] for s in solutions]
    out["val_error"] = {"mean": float(np.mean(errs)), "min": min(errs), "max": max(errs)}
    return out


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise IOFailure(f"{root} is not a directory")
    paths = sorted(root.rglob("solution.json"))
    if not paths:
        raise ConfigError(f"empty run directory: {root}")
    try:
        sols = [json.loads(p.read_text()) for p in paths]
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed solution file: {exc}") from exc
    summary = summarize(sols)
    lines = [f"runs: {summary['runs']}, satisfaction rate: {summary['satisfaction_rate']:.2f}", "",
             "| metric | mean | min | max |", "|---|---|---|---|"]
    for key in (*METRIC_NAMES, "val_error"):
        s = summary[key]
        lines.append(f"| {key} | {s['mean']:.6g} | {s['min']:.6g} | {s['max']:.6g} |")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "min", "max"])
        for key in (*METRIC_NAMES, "val_error"):
            s = summary[key]
            w.writerow([key, repr(s["mean"]), repr(s["min"]), repr(s["max"])])
        w.writerow(["satisfaction_rate", repr(summary["satisfaction_rate"]), "", ""])
        _atomic_write(args.csv, buf.getvalue())
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coexplore", description="Hardware/architecture co-exploration with hard constraints.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sample", help="sample (architecture, hardware, metrics) records")
    s.add_argument("--config")
    s.add_argument("--n", type=int, default=50_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("pretrain", help="pretrain the metric estimator")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("search", help="run a co-exploration search")
    s.add_argument("--config")
    s.add_argument("--estimator")
    s.add_argument("--constraints", default="")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1, help="run this many consecutive seeds")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--mode", choices=(*MODES, "nas-then-hw"), default="hdx")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("sweep", help="unconstrained searches over a lambda grid")
    s.add_argument("--config")
    s.add_argument("--estimator")
    s.add_argument("--lambda", dest="lambdas", required=True)
    s.add_argument("--seeds", default="0")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("autotune", help="repeat baseline searches until the metric is in [T/2, T]")
    s.add_argument("--config")
    s.add_argument("--estimator")
    s.add_argument("--constraints")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=MODES, default="soft")
    s.add_argument("--out")
    s.set_defaults(func=cmd_autotune)

    s = sub.add_parser("report", help="summarize a directory of runs")
    s.add_argument("run_dir")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(_threads()):
            return args.func(args)
    except (ConfigError, ConstraintError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFailure, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
