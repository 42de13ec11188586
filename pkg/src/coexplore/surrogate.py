"""Differentiable hardware evaluator: a frozen metric estimator and a hardware generator.

The estimator regresses z-normalized log metrics from a 48-d architecture
encoding plus a 6-d hardware encoding. The generator maps an architecture
encoding to a hardware encoding (three sigmoids and a 3-way softmax).
Both are five dense layers with residual connections between the
equal-width hidden layers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from math import floor, log2
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffengine as de
from .hwmodel import DATAFLOWS, PE_X, PE_Y, RF_BYTES, METRIC_NAMES, HwConfig, Metrics, Record
from .supernet import N_CANDIDATES, one_hot_encoding

log = logging.getLogger(__name__)

HW_DIM = 6
EST_HIDDEN = 256
GEN_HIDDEN = 128
N_DENSE = 5


# -- hardware encoding ------------------------------------------------------

@dataclass(frozen=True)
class HwEncoding:
    px_n: float
    py_n: float
    rf_n: float
    df: tuple[float, float, float]

    def __post_init__(self):
        if min(self.df) < 0 or abs(sum(self.df) - 1.0) > 1e-9:
            raise ValueError(f"dataflow weights {self.df} are not on the simplex")

    def to_vector(self) -> np.ndarray:
        return np.array([self.px_n, self.py_n, self.rf_n, *self.df])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "HwEncoding":
        v = [float(x) for x in v]
        return cls(v[0], v[1], v[2], (v[3], v[4], v[5]))


def encode(hw: HwConfig) -> HwEncoding:
    df = tuple(float(d == hw.dataflow) for d in DATAFLOWS)
    return HwEncoding((hw.pe_x - 12) / 8, (hw.pe_y - 8) / 16, log2(hw.rf_bytes / 16) / 4, df)


def _round(x: float) -> int:
    return int(floor(x + 0.5))


def _clamp(x: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, x))


def discretize(enc: HwEncoding) -> HwConfig:
    pe_x = _clamp(_round(12 + 8 * enc.px_n), PE_X[0], PE_X[-1])
    pe_y = _clamp(_round(8 + 16 * enc.py_n), PE_Y[0], PE_Y[-1])
    rf = 16 * 2 ** _clamp(_round(4 * enc.rf_n), 0, len(RF_BYTES) - 1)
    return HwConfig(pe_x, pe_y, rf, DATAFLOWS[int(np.argmax(enc.df))])


# -- residual perceptron ----------------------------------------------------

def init_mlp(in_dim: int, hidden: int, out_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * (N_DENSE - 1) + [out_dim]
    weights = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        std = np.sqrt(2.0 / a) if i < N_DENSE - 1 else np.sqrt(1.0 / a)
        if 0 < i < N_DENSE - 1:
            std *= 0.5  # residual branches start small
        weights[f"d{i}.W"] = rng.normal(0.0, std, (a, b))
        weights[f"d{i}.b"] = np.zeros(b)
    return weights


def attach_mlp(g: de.Graph, x: de.Node, weights: dict[str, np.ndarray], prefix: str,
               frozen: bool) -> de.Node:
    """Add the five-layer residual perceptron to ``g``; returns the linear output node.

    With ``frozen`` the weights become constants (never differentiated);
    otherwise they are parameters sharing memory with ``weights``.
    """
    leaf = g.const if frozen else g.param

    def dense(i, h):
        w = leaf(f"{prefix}d{i}.W", weights[f"d{i}.W"])
        b = leaf(f"{prefix}d{i}.b", weights[f"d{i}.b"])
        return g.add(g.matmul(h, w), b)

    h = g.relu(dense(0, x))
    for i in range(1, N_DENSE - 1):
        h = g.add(h, g.relu(dense(i, h)))
    return dense(N_DENSE - 1, h)


# -- estimator --------------------------------------------------------------

class NotPretrainedError(RuntimeError):
    pass


class Estimator:
    """Metric regressor over (architecture encoding, hardware encoding).

    Targets are ``log(metric)`` standardized with ``mean``/``std`` from the
    training split; predictions are mapped back by ``exp(std*y + mean)``.
    """

    def __init__(self, n_layers: int = 8, seed: int = 0, hidden: int = EST_HIDDEN) -> None:
        self.n_layers = n_layers
        self.arch_dim = n_layers * N_CANDIDATES
        self.hidden = hidden
        self.weights = init_mlp(self.arch_dim + HW_DIM, hidden, 3, seed)
        self.mean = np.zeros(3)
        self.std = np.ones(3)
        self.refs: dict[str, float] | None = None
        self._predict_graph = None

    @property
    def pretrained(self) -> bool:
        return self.refs is not None

    def _require(self) -> None:
        if not self.pretrained:
            raise NotPretrainedError("estimator has not been pretrained or loaded")

    def attach(self, g: de.Graph, features: de.Node, prefix: str = "est.") -> de.Node:
        """Frozen estimator on ``features`` (n, 54); returns positive metrics (n, 3)."""
        self._require()
        z = attach_mlp(g, features, self.weights, prefix, frozen=True)
        std = g.const(f"{prefix}std", self.std)
        mean = g.const(f"{prefix}mean", self.mean)
        return g.exp(g.add(g.mul(z, std), mean), name="metrics")

    def predict_array(self, arch: np.ndarray, hw: np.ndarray) -> np.ndarray:
        """Metrics for row-stacked encodings; columns follow ``METRIC_NAMES``."""
        self._require()
        if self._predict_graph is None:
            g = de.Graph()
            x = g.input("x", (None, self.arch_dim + HW_DIM))
            self._predict_graph = (g, self.attach(g, x))
        g, out = self._predict_graph
        x = np.hstack([np.atleast_2d(arch), np.atleast_2d(hw)])
        return g.forward({"x": x})[out]

    def fingerprint(self) -> bytes:
        return b"".join(self.weights[k].tobytes() for k in sorted(self.weights))

    # -- persistence

    def save(self, path: str | Path) -> None:
        self._require()
        doc = {
            "norm": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "refs": self.refs,
            "layers": self.n_layers,
            "hidden": self.hidden,
            "params": de.params_to_json(self.weights),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "Estimator":
        doc = json.loads(Path(path).read_text())
        est = cls(int(doc["layers"]), hidden=int(doc.get("hidden", EST_HIDDEN)))
        expected = {k: v.shape for k, v in est.weights.items()}
        est.weights = de.params_from_json(doc["params"], expected)
        est.mean = np.asarray(doc["norm"]["mean"], dtype=float)
        est.std = np.asarray(doc["norm"]["std"], dtype=float)
        if est.mean.shape != (3,) or est.std.shape != (3,) or np.any(est.std <= 0):
            raise ValueError(f"{path}: bad normalization header")
        refs = {k: float(doc["refs"][k]) for k in METRIC_NAMES}
        if min(refs.values()) <= 0:
            raise ValueError(f"{path}: normalization references must be positive")
        est.refs = refs
        return est


def estimator_predict(est: Estimator, arch: np.ndarray, hw: HwEncoding) -> Metrics:
    return Metrics(*(float(v) for v in est.predict_array(arch, hw.to_vector())[0]))


def records_to_arrays(records: Sequence[Record]) -> tuple[np.ndarray, np.ndarray]:
    """(features (n, 54), raw metrics (n, 3)) for a dataset."""
    x = np.array([np.concatenate([one_hot_encoding(r.arch), encode(r.hw).to_vector()]) for r in records])
    y = np.array([r.metrics.as_tuple() for r in records])
    return x, y


@dataclass
class PretrainReport:
    holdout_accuracy: dict[str, float]  # fraction within 10% relative error
    holdout_mse: float
    mean_baseline_mse: float
    train_size: int
    holdout_size: int

    def to_json(self) -> dict:
        return {
            "holdout_accuracy": self.holdout_accuracy,
            "holdout_mse": self.holdout_mse,
            "mean_baseline_mse": self.mean_baseline_mse,
            "train_size": self.train_size,
            "holdout_size": self.holdout_size,
        }


MIN_DATASET = 10_000


def holdout_accuracy(pred: np.ndarray, truth: np.ndarray, rel: float = 0.10) -> dict[str, float]:
    within = np.abs(pred - truth) <= rel * np.abs(truth)
    return {name: float(within[:, i].mean()) for i, name in enumerate(METRIC_NAMES)}


def _split(n: int, seed: int):
    rng = np.random.default_rng([seed, 2])
    perm = rng.permutation(n)
    return rng, perm[:n // 10], perm[n // 10:]


def holdout_indices(n: int, seed: int = 0) -> np.ndarray:
    """Indices of the 10% holdout used by ``pretrain_estimator`` for this seed."""
    return _split(n, seed)[1]


def pretrain_estimator(records: Sequence[Record], epochs: int = 200, batch: int = 256,
                       lr: float = 1e-4, seed: int = 0, n_layers: int | None = None,
                       min_records: int = MIN_DATASET) -> tuple[Estimator, PretrainReport]:
    """Fit an estimator with Adam on MSE of normalized log metrics.

    Records are split 90/10 by a seeded permutation. Normalization
    references for the hardware cost are the full-dataset metric means.
    """
    if len(records) < min_records:
        raise ValueError(f"dataset has {len(records)} records, need at least {min_records}")
    n_layers = n_layers or len(records[0].arch)
    x, raw = records_to_arrays(records)
    logy = np.log(raw)
    rng, hold, train = _split(len(x), seed)

    est = Estimator(n_layers, seed=seed)
    est.mean = logy[train].mean(axis=0)
    est.std = logy[train].std(axis=0)
    est.std[est.std == 0] = 1.0
    target = (logy - est.mean) / est.std

    g = de.Graph()
    xin = g.input("x", (None, x.shape[1]))
    tin = g.input("t", (None, 3))
    inv_n = g.input("inv_n", (1,))
    pred = attach_mlp(g, xin, est.weights, "", frozen=False)
    diff = g.sub(pred, tin)
    loss = g.mul(g.sum(g.mul(diff, diff)), inv_n, name="mse")

    opt = de.Adam(g.params, lr=lr)
    for epoch in range(epochs):
        order = train[rng.permutation(len(train))]
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            feed = {"x": x[idx], "t": target[idx], "inv_n": np.array([1.0 / (3 * len(idx))])}
            trace = g.forward(feed)
            total += float(trace[loss][0]) * len(idx)
            opt.step(trace.backward(loss))
        if epoch % 20 == 0 or epoch == epochs - 1:
            log.info("estimator epoch %d train mse %.5f", epoch, total / len(train))

    feed = {"x": x[hold], "t": target[hold], "inv_n": np.array([1.0 / (3 * len(hold))])}
    trace = g.forward(feed)
    mse = float(trace[loss][0])
    baseline = float(np.mean((target[hold] - target[train].mean(axis=0)) ** 2))
    est.refs = dict(zip(METRIC_NAMES, (float(v) for v in raw.mean(axis=0))))
    pred_raw = np.exp(trace[pred] * est.std + est.mean)
    report = PretrainReport(holdout_accuracy(pred_raw, raw[hold]), mse, baseline, len(train), len(hold))
    return est, report


# -- generator --------------------------------------------------------------

class Generator:
    """Architecture encoding -> hardware encoding; weights are trained during search."""

    def __init__(self, n_layers: int = 8, seed: int = 0, hidden: int = GEN_HIDDEN) -> None:
        self.n_layers = n_layers
        self.arch_dim = n_layers * N_CANDIDATES
        self.weights = init_mlp(self.arch_dim, hidden, HW_DIM, seed)
        self._graph = None

    def attach(self, g: de.Graph, arch: de.Node, prefix: str = "gen.") -> de.Node:
        """Trainable generator on ``arch`` (n, 48); returns the (n, 6) encoding node."""
        z = attach_mlp(g, arch, self.weights, prefix, frozen=False)
        sizes = g.sigmoid(g.take(z, [0, 1, 2], axis=1))
        df = g.softmax(g.take(z, [3, 4, 5], axis=1))
        return g.concat([sizes, df], axis=1, name="hw_enc")

    def forward_array(self, arch: np.ndarray) -> np.ndarray:
        if self._graph is None:
            g = de.Graph()
            x = g.input("arch", (None, self.arch_dim))
            self._graph = (g, self.attach(g, x))
        g, out = self._graph
        return g.forward({"arch": np.atleast_2d(arch)})[out]


def generator_forward(gen: Generator, arch: np.ndarray) -> HwEncoding:
    return HwEncoding.from_vector(gen.forward_array(arch)[0])
