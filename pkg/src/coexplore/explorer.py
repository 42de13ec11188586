"""Co-exploration loop and baseline procedures.

Every step updates the supernet weights ``w`` (Adam on the task loss), the
architecture logits ``alpha`` and the generator weights ``v`` (plain
gradient descent, optionally with constraint-driven gradient manipulation),
then advances each constraint's pull ``delta``.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffengine as de
from .constrainer import ConstraintSpec, GradientBundle, delta_step, manipulate
from .hwmodel import (CANDIDATES, METRIC_NAMES, CostConfig, HwConfig, Metrics, cost_hw,
                      evaluate, grid_search, mbconv_expand)
from .supernet import Supernet, gen_synthetic_dataset, harden, one_hot_encoding
from .surrogate import Estimator, Generator, discretize, encode, estimator_predict, generator_forward

log = logging.getLogger(__name__)

MODES = ("hdx", "soft", "unconstrained")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    lambda_cost: float = 0.01
    cost: CostConfig = CostConfig()
    constraints: tuple[ConstraintSpec, ...] = ()
    epochs: int = 120
    batch: int = 64
    steps_per_epoch: int | None = None  # None: one full pass over the training split
    lr_w: float = 1e-3
    lr_alpha: float = 0.01
    lr_v: float = 0.01
    seeds: int = 1
    soft_lambda: float = 0.0
    margin: float = 1.0  # search against margin * T; verification always uses T
    mode: str = "hdx"
    n_layers: int = 8
    task_seed: int = 0
    w_every: int = 1
    alpha_every: int = 1
    v_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if min(self.lr_w, self.lr_alpha, self.lr_v) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_cost < 0 or self.soft_lambda < 0:
            raise ValueError("lambda_cost and soft_lambda must be >= 0")
        if not 0 < self.margin <= 1:
            raise ValueError("margin must be in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if min(self.w_every, self.alpha_every, self.v_every) < 1:
            raise ValueError("update intervals must be >= 1")


@dataclass
class Solution:
    choices: list[int]
    hw: HwConfig
    oracle_metrics: Metrics
    estimator_metrics: Metrics | None
    final_loss: float
    loss_nas: float
    val_error: float
    seed: int
    constraints: tuple[ConstraintSpec, ...] = ()
    trajectory_path: str | None = None

    @property
    def arch(self) -> list[tuple[int, int]]:
        return [CANDIDATES[c] for c in self.choices]

    @property
    def satisfied(self) -> dict[str, bool]:
        return {c.metric: self.oracle_metrics[c.metric] <= c.target for c in self.constraints}

    @property
    def in_constraint(self) -> bool:
        return all(self.satisfied.values())

    def to_json(self) -> dict:
        return {
            "arch": [list(a) for a in self.arch],
            "hw": self.hw.to_json(),
            "oracle": self.oracle_metrics.to_json(),
            "estimator": None if self.estimator_metrics is None else self.estimator_metrics.to_json(),
            "loss": self.final_loss,
            "loss_nas": self.loss_nas,
            "val_error": self.val_error,
            "seed": self.seed,
            "constraints": {c.metric: c.target for c in self.constraints},
            "satisfied": self.satisfied,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


@functools.lru_cache(maxsize=4)
def _task(seed: int):
    return gen_synthetic_dataset(seed)


def _flat(grads: dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([grads[n].reshape(-1) for n in names])


def _apply(params: dict[str, np.ndarray], names: Sequence[str], direction: np.ndarray,
           lr: float) -> None:
    start = 0
    for n in names:
        p = params[n]
        p -= lr * direction[start:start + p.size].reshape(p.shape)
        start += p.size


class Explorer:
    """State of one search: supernet, generator, constraint pulls, step counter."""

    def __init__(self, cfg: SearchConfig, est: Estimator | None, seed: int) -> None:
        if est is None and (cfg.lambda_cost > 0 or cfg.constraints or cfg.soft_lambda > 0):
            raise SearchError("a pretrained estimator is required for hardware-aware search")
        if est is not None and not est.pretrained:
            raise SearchError("estimator is not pretrained")
        if cfg.mode == "unconstrained" and cfg.constraints:
            raise SearchError("unconstrained mode does not take constraints")
        if est is not None and est.n_layers != cfg.n_layers:
            raise SearchError(f"estimator built for {est.n_layers} layers, config has {cfg.n_layers}")
        self.cfg = cfg
        self.est = est
        self.seed = seed
        self.task = _task(cfg.task_seed)
        self.net = Supernet(cfg.n_layers, seed)
        self.gen = Generator(cfg.n_layers, seed=seed + 7919)
        self.opt_w = de.Adam(self.net.params, lr=cfg.lr_w, names=self.net.weight_names)
        self.specs = list(cfg.constraints)
        self.step_count = 0
        self.last_alpha_bundle: GradientBundle | None = None
        self.last_v_bundle: GradientBundle | None = None
        self.last_delta = 0.0
        self.cost_cfg = cfg.cost if est is None else cfg.cost.with_refs(est.refs)
        if est is not None:
            self._build_evaluator()

    @property
    def alpha(self) -> np.ndarray:
        return self.net.params["alpha"]

    def _build_evaluator(self) -> None:
        cfg = self.cfg
        g = de.Graph()
        alpha = g.param("alpha", self.alpha)  # shares memory with the supernet's alpha
        arch = g.reshape(g.softmax(alpha), (1, -1), name="arch")
        enc = self.gen.attach(g, arch)
        metrics = self.est.attach(g, g.concat([arch, enc], axis=1))
        self.metrics_node = metrics
        self.cost_node = g.sum(g.mul(metrics, g.const("cost_w", self.cost_cfg.weights())), name="cost")
        self.t_nodes, self.soft_nodes = [], []
        for i, spec in enumerate(self.specs):
            t = g.reshape(g.take(metrics, [METRIC_NAMES.index(spec.metric)], axis=1), (1,))
            self.t_nodes.append(t)
            one = g.const(f"one{i}", [1.0])
            self.soft_nodes.append(g.relu(g.sub(g.scale(t, 1.0 / spec.target), one)))
        if self.specs:
            soft = self.soft_nodes[0]
            for s in self.soft_nodes[1:]:
                soft = g.add(soft, s)
            self.soft_node = soft  # unweighted; soft_lambda applies in the loss
        self.eval_graph = g
        self.gen_names = [n for n in g.params if n != "alpha"]

    def design_metrics(self) -> np.ndarray:
        """Estimator metrics of the design extraction would return right now."""
        arch = one_hot_encoding(harden(self.alpha))
        hw = discretize(generator_forward(self.gen, arch))
        return self.est.predict_array(arch, encode(hw).to_vector())[0]

    def header(self) -> list[str]:
        cols = ["epoch", "step", "loss_nas", "cost_hw", "global_loss"]
        for s in self.specs:
            cols += [f"{s.metric}_t", f"{s.metric}_T", f"{s.metric}_delta"]
        cols += ["manipulated", "dot"]
        if self.cfg.mode == "soft":
            cols.append("soft")
        return cols

    def search_step(self, epoch: int, xb, yb, xv, yv) -> dict:
        cfg = self.cfg
        k = self.step_count
        self.step_count += 1

        if k % cfg.w_every == 0:
            _, gw = self.net.loss_and_grads(xb, yb)
            self.opt_w.step(gw)
        loss_nas, gn = self.net.loss_and_grads(xv, yv)
        g_alpha = gn["alpha"].reshape(-1)

        row = {"epoch": epoch, "step": k, "loss_nas": loss_nas}
        cost = 0.0
        soft = 0.0
        manipulated = False
        dot = 0.0
        if self.est is not None:
            trace = self.eval_graph.forward()
            cost = float(trace[self.cost_node][0])
            gc = trace.backward(self.cost_node)
            g_alpha = g_alpha + cfg.lambda_cost * gc["alpha"].reshape(-1)
            gv_loss = _flat(gc, self.gen_names)
            gv_const = np.zeros_like(gv_loss)
            ga_const = np.zeros_like(g_alpha)
            violated_flags = []
            if self.specs:
                # violation is judged on the design extraction would return; the
                # pull acts through the relaxed pipeline
                t = self.design_metrics()
                effective = [s.target * cfg.margin for s in self.specs]
                violated_flags = [t[METRIC_NAMES.index(s.metric)] > T for s, T in zip(self.specs, effective)]
                if cfg.mode == "soft":
                    soft = float(trace[self.soft_node][0])
                    if cfg.soft_lambda > 0:
                        gs = trace.backward(self.soft_node)
                        g_alpha = g_alpha + cfg.soft_lambda * gs["alpha"].reshape(-1)
                        gv_loss = gv_loss + cfg.soft_lambda * _flat(gs, self.gen_names)
                elif cfg.mode == "hdx":
                    for node, v in zip(self.t_nodes, violated_flags):
                        if v:
                            gh = trace.backward(node)
                            ga_const = ga_const + gh["alpha"].reshape(-1)
                            gv_const = gv_const + _flat(gh, self.gen_names)
            violated = cfg.mode == "hdx" and any(violated_flags)
            delta = sum(s.delta for s, v in zip(self.specs, violated_flags) if v)
            self.last_delta = delta
            # a block whose constraint gradient vanished (saturated softmax) cannot
            # help; only both vanishing points at a disconnected constraint path
            a_live, v_live = bool(ga_const @ ga_const > 0), bool(gv_const @ gv_const > 0)
            both_dead = not (a_live or v_live)
            ba = manipulate(g_alpha, ga_const, violated and (a_live or both_dead), delta)
            bv = manipulate(gv_loss, gv_const, violated and v_live, delta)
            self.last_alpha_bundle, self.last_v_bundle = ba, bv
            manipulated, dot = ba.manipulated, ba.dot
            if k % cfg.alpha_every == 0:
                self.alpha[...] -= cfg.lr_alpha * ba.g.reshape(self.alpha.shape)
            if k % cfg.v_every == 0:
                _apply(self.eval_graph.params, self.gen_names, bv.g, cfg.lr_v)
            for i, s in enumerate(self.specs):
                row[f"{s.metric}_t"] = float(t[METRIC_NAMES.index(s.metric)])
                row[f"{s.metric}_T"] = s.target * cfg.margin
                row[f"{s.metric}_delta"] = s.delta
            if cfg.mode == "hdx":
                self.specs = [delta_step(s, not v) for s, v in zip(self.specs, violated_flags)]
        elif k % cfg.alpha_every == 0:
            self.alpha[...] -= cfg.lr_alpha * g_alpha.reshape(self.alpha.shape)

        global_loss = loss_nas + cfg.lambda_cost * cost + cfg.soft_lambda * soft
        row.update(cost_hw=cost, global_loss=global_loss, manipulated=int(manipulated), dot=dot)
        if cfg.mode == "soft":
            row["soft"] = soft
        if not np.isfinite(global_loss) or not np.all(np.isfinite(self.alpha)):
            raise SearchError(f"non-finite loss at step {k}: {row}")
        return row

    def batches(self):
        """Yields (epoch, train batch, val batch) for the whole run; seeded."""
        cfg, task = self.cfg, self.task
        rng = np.random.default_rng([self.seed, 3])
        n_train, n_val = len(task.x_train), len(task.x_val)
        full = n_train // cfg.batch
        steps = full if cfg.steps_per_epoch is None else cfg.steps_per_epoch
        vpos, vperm = n_val, None
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n_train)
            for s in range(steps):
                i = perm[(s % full) * cfg.batch:(s % full + 1) * cfg.batch]
                if vpos + cfg.batch > n_val:
                    vperm, vpos = rng.permutation(n_val), 0
                j = vperm[vpos:vpos + cfg.batch]
                vpos += cfg.batch
                yield epoch, (task.x_train[i], task.y_train[i]), (task.x_val[j], task.y_val[j])

    def run(self, trajectory: io.TextIOBase | None = None) -> list[dict]:
        writer = None
        if trajectory is not None:
            writer = csv.DictWriter(trajectory, fieldnames=self.header(), lineterminator="\n")
            writer.writeheader()
        rows = []
        for epoch, (xb, yb), (xv, yv) in self.batches():
            try:
                row = self.search_step(epoch, xb, yb, xv, yv)
            except SearchError:
                if writer is not None:
                    writer.writerow({c: "nan" for c in self.header()} | {"epoch": epoch})
                raise
            rows.append(row)
            if writer is not None:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
        return rows

    def extract(self, trajectory_path: str | None = None) -> Solution:
        return extract_solution(self.alpha, self.gen, self.est, self)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def extract_solution(alpha: np.ndarray, gen: Generator, est: Estimator | None,
                     explorer: Explorer | None = None, hw: HwConfig | None = None) -> Solution:
    """Harden ``alpha`` (argmax, ties to lower index), generate hardware, verify with the oracle."""
    choices = harden(alpha)
    arch = one_hot_encoding(choices)
    if hw is None:
        hw = discretize(generator_forward(gen, arch))
    oracle = evaluate(mbconv_expand([CANDIDATES[c] for c in choices]), hw)
    est_metrics = None if est is None else estimator_predict(est, arch, encode(hw))
    cfg = explorer.cfg if explorer is not None else SearchConfig()
    cost_cfg = explorer.cost_cfg if explorer is not None else cfg.cost
    loss_nas, err = float("nan"), float("nan")
    if explorer is not None:
        loss_nas, err = explorer.net.evaluate(explorer.task.x_val, explorer.task.y_val)
    final = loss_nas + cfg.lambda_cost * cost_hw(oracle, cost_cfg)
    return Solution(choices, hw, oracle, est_metrics, final, loss_nas, err,
                    seed=explorer.seed if explorer is not None else -1,
                    constraints=cfg.constraints)


def run_search(cfg: SearchConfig, est: Estimator | None, seed: int,
               out_dir: str | Path | None = None) -> Solution:
    """One full search; writes ``trajectory.csv`` and ``solution.json`` into ``out_dir`` if given."""
    explorer = Explorer(cfg, est, seed)
    if out_dir is None:
        explorer.run()
        return explorer.extract()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = out / "trajectory.csv"
    with open(traj, "w", newline="") as fh:
        explorer.run(fh)
    sol = explorer.extract()
    sol.trajectory_path = str(traj)
    sol.write(out / "solution.json")
    return sol


def soft_search(cfg: SearchConfig, est: Estimator, seed: int,
                out_dir: str | Path | None = None) -> Solution:
    """The soft-penalty baseline: adds ``soft_lambda * max(t/T - 1, 0)``, no manipulation."""
    return run_search(replace(cfg, mode="soft"), est, seed, out_dir)


def nas_then_hw(cfg: SearchConfig, seed: int, est: Estimator | None = None,
                cost: CostConfig | None = None) -> Solution:
    """Plain NAS (no hardware term), then exhaustive oracle grid search for the hardware.

    ``cost`` should carry the normalization references; by default they come
    from ``est`` when given. If no grid point meets the constraints the
    unconstrained grid minimum is returned and the solution reports failure.
    """
    plain = replace(cfg, lambda_cost=0.0, constraints=(), mode="unconstrained", soft_lambda=0.0)
    explorer = Explorer(plain, None, seed)
    explorer.run()
    if cost is None:
        cost = cfg.cost if est is None else cfg.cost.with_refs(est.refs)
    layers = mbconv_expand([CANDIDATES[c] for c in harden(explorer.alpha)])
    limits = {c.metric: c.target for c in cfg.constraints}
    found = grid_search(layers, cost, limits) or grid_search(layers, cost)
    sol = extract_solution(explorer.alpha, explorer.gen, est, explorer, hw=found[0])
    sol.constraints = tuple(cfg.constraints)
    sol.final_loss = sol.loss_nas + cfg.lambda_cost * cost_hw(sol.oracle_metrics, cost)
    return sol


def run_mode(cfg: SearchConfig, est: Estimator, seed: int, mode: str,
             out_dir: str | Path | None = None) -> Solution:
    if mode == "nas-then-hw":
        sol = nas_then_hw(cfg, seed, est)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            sol.write(Path(out_dir) / "solution.json")
        return sol
    if mode == "unconstrained":
        cfg = replace(cfg, constraints=())
    return run_search(replace(cfg, mode=mode), est, seed, out_dir)


# -- baseline tuning procedure ----------------------------------------------

MAX_TUNING_SEARCHES = 12


@dataclass
class TuneResult:
    solution: Solution
    search_count: int
    values: list[float] = field(default_factory=list)  # control parameter per search
    metrics: list[float] = field(default_factory=list)  # constrained metric per search
    success: bool = True

    def to_json(self) -> dict:
        return {
            "search_count": self.search_count,
            "control_values": self.values,
            "metric_values": self.metrics,
            "success": self.success,
            "solution": self.solution.to_json(),
        }


def autotune(cfg: SearchConfig, est: Estimator, target: ConstraintSpec, seed: int,
             mode: str = "soft", max_searches: int = MAX_TUNING_SEARCHES) -> TuneResult:
    """Repeat searches, tuning one control parameter until the metric lands in [T/2, T].

    ``mode="soft"`` tunes ``soft_lambda`` of the soft baseline and
    ``mode="unconstrained"`` tunes ``lambda_cost``. The parameter is doubled
    until the metric is under T; if it then undershoots T/2 the parameter is
    bisected between the last too-high and too-low values. ``mode="hdx"``
    runs a single hard-constrained search.
    """
    T = target.target
    if mode == "hdx":
        sol = run_search(replace(cfg, mode="hdx", constraints=(target,)), est, seed)
        m = sol.oracle_metrics[target.metric]
        return TuneResult(sol, 1, [cfg.lambda_cost], [m], 0.5 * T <= m <= T)

    if mode == "soft":
        field_name, base = "soft_lambda", replace(cfg, mode="soft", constraints=(target,))
    elif mode == "unconstrained":
        field_name, base = "lambda_cost", replace(cfg, mode="unconstrained", constraints=())
    else:
        raise ValueError(f"cannot autotune mode {mode!r}")
    value = getattr(base, field_name)
    if value <= 0:
        raise ValueError(f"{field_name} must start positive to be doubled")

    result = TuneResult(None, 0)  # type: ignore[arg-type]
    lo, hi = None, None  # largest value that overshot T, smallest that undershot T/2
    while result.search_count < max_searches:
        search_seed = seed * 1000 + result.search_count
        sol = run_search(replace(base, **{field_name: value}), est, search_seed)
        m = sol.oracle_metrics[target.metric]
        result.search_count += 1
        result.values.append(value)
        result.metrics.append(m)
        result.solution = sol
        log.info("autotune %s=%g -> %s=%g (T=%g)", field_name, value, target.metric, m, T)
        if 0.5 * T <= m <= T:
            result.solution.constraints = (target,)
            return result
        if m > T:
            lo = value
            value = value * 2 if hi is None else 0.5 * (value + hi)
        else:
            hi = value
            value = 0.5 * value if lo is None else 0.5 * (lo + value)
    result.success = False
    result.solution.constraints = (target,)
    return result


def sweep_lambda(cfg: SearchConfig, est: Estimator, lambdas: Sequence[float],
                 seeds: Sequence[int] = (0,)) -> list[dict]:
    """One unconstrained search per (lambda, seed); oracle-evaluated rows."""
    if not lambdas:
        raise ValueError("empty lambda list")
    rows = []
    for lam in lambdas:
        for seed in seeds:
            sol = run_search(replace(cfg, lambda_cost=lam, mode="unconstrained", constraints=()), est, seed)
            m = sol.oracle_metrics
            rows.append({
                "lambda": lam, "seed": seed, "error": sol.val_error,
                "latency_ms": m.latency_ms, "energy_mJ": m.energy_mJ, "area_mm2": m.area_mm2,
                "cost_hw": cost_hw(m, cfg.cost.with_refs(est.refs)),
            })
    return rows
