"""Softmax-relaxed supernet over MBConv-like candidates on a synthetic task.

Each of the ``L`` mixed layers holds one dense residual block per candidate
``(kernel, expand)``; block width ``4*expand + 2*(kernel-3)`` is the capacity
proxy for the real MBConv block that the hardware oracle sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffengine as de
from .hwmodel import CANDIDATES

N_CANDIDATES = len(CANDIDATES)
INPUT_DIM = 48
HIDDEN = 64
N_CLASSES = 10


@dataclass(frozen=True)
class CandidateOp:
    kernel: int
    expand: int

    @property
    def width(self) -> int:
        return 4 * self.expand + 2 * (self.kernel - 3)


CANDIDATE_OPS = tuple(CandidateOp(k, e) for k, e in CANDIDATES)
WIDTHS = tuple(op.width for op in CANDIDATE_OPS)


# -- synthetic task ---------------------------------------------------------

@dataclass
class TaskDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    seed: int
    teacher_seed: int

    def class_frequencies(self) -> np.ndarray:
        return np.bincount(self.y_train, minlength=N_CLASSES) / len(self.y_train)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for split, xs, ys in (("train", self.x_train, self.y_train), ("val", self.x_val, self.y_val)):
                for x, y in zip(xs, ys):
                    fh.write(json.dumps({"split": split, "x": x.tolist(), "y": int(y)}) + "\n")


def _teacher_labels(x: np.ndarray, teacher_seed: int) -> np.ndarray:
    rng = np.random.default_rng(teacher_seed)
    dims = (INPUT_DIM, 64, 64, N_CLASSES)
    h = x
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
        h = h @ w
        if i < len(dims) - 2:
            h = np.maximum(h, 0.0)
    # output bias centres each class logit over the sample
    return np.argmax(h - h.mean(axis=0), axis=1)


def gen_synthetic_dataset(seed: int = 0, n_train: int = 10000, n_val: int = 2000,
                          max_tries: int = 100) -> TaskDataset:
    """Gaussian inputs labelled by a random 3-layer teacher perceptron.

    If the teacher gives some class a training frequency outside
    [0.05, 0.20], the teacher seed is advanced until it does not.
    """
    rng = np.random.default_rng([seed, 0])
    x = rng.standard_normal((n_train + n_val, INPUT_DIM))
    for attempt in range(max_tries):
        teacher_seed = seed * 1000 + attempt
        y = _teacher_labels(x, teacher_seed)
        freq = np.bincount(y[:n_train], minlength=N_CLASSES) / n_train
        if freq.min() >= 0.05 and freq.max() <= 0.20:
            break
    else:
        raise RuntimeError(f"no balanced teacher found for seed {seed}")
    return TaskDataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], seed, teacher_seed)


# -- architecture parameters ------------------------------------------------

def probabilities(alpha: np.ndarray) -> np.ndarray:
    return de._softmax(np.asarray(alpha, dtype=np.float64))


def arch_encoding(alpha: np.ndarray) -> np.ndarray:
    """Row-stochastic candidate probabilities, flattened row-major."""
    return probabilities(alpha).reshape(-1)


def one_hot_encoding(choices) -> np.ndarray:
    enc = np.zeros((len(choices), N_CANDIDATES))
    enc[np.arange(len(choices)), list(choices)] = 1.0
    return enc.reshape(-1)


def harden(alpha: np.ndarray) -> list[int]:
    """Per-layer argmax; ties go to the lower candidate index."""
    return [int(i) for i in np.argmax(alpha, axis=1)]


# -- supernet ---------------------------------------------------------------

def _expansion_matrix() -> np.ndarray:
    """Maps per-candidate probabilities onto the concatenated hidden columns."""
    e = np.zeros((N_CANDIDATES, sum(WIDTHS)))
    start = 0
    for b, width in enumerate(WIDTHS):
        e[b, start:start + width] = 1.0
        start += width
    return e


class Supernet:
    """Relaxed supernet: input projection, ``n_layers`` mixed residual layers, head.

    Mixed layer ``l`` computes ``x + sum_b p[l, b] * V_b relu(U_b x)``. All six
    blocks are evaluated as one concatenated matmul pair; probabilities are
    spread over each block's hidden columns.
    """

    def __init__(self, n_layers: int = 8, seed: int = 0) -> None:
        self.n_layers = n_layers
        rng = np.random.default_rng([seed, 1])
        g = de.Graph()
        self.graph = g
        self.x = g.input("x", (None, INPUT_DIM))
        self.y = g.input("y", (None,))
        self.alpha = g.param("alpha", np.zeros((n_layers, N_CANDIDATES)))
        expand = g.const("expand", _expansion_matrix())

        w_in = g.param("proj.W", rng.normal(0, np.sqrt(2.0 / INPUT_DIM), (INPUT_DIM, HIDDEN)))
        b_in = g.param("proj.b", np.zeros(HIDDEN))
        h = g.add(g.matmul(self.x, w_in), b_in, name="proj")
        self.probs = g.softmax(self.alpha, name="probs")
        for l in range(n_layers):
            us, vs = [], []
            for b, width in enumerate(WIDTHS):
                us.append(g.param(f"layer{l}.b{b}.U", rng.normal(0, np.sqrt(2.0 / HIDDEN), (HIDDEN, width))))
                # small residual branch keeps the 8-layer stack well conditioned at init
                vs.append(g.param(f"layer{l}.b{b}.V", rng.normal(0, 0.5 / np.sqrt(width), (width, HIDDEN))))
            u_all = g.concat(us, axis=1)
            v_all = g.concat(vs, axis=0)
            p_row = g.take(self.probs, [l], axis=0)
            spread = g.matmul(p_row, expand)
            hidden = g.mul(g.relu(g.matmul(h, u_all)), spread)
            h = g.add(h, g.matmul(hidden, v_all), name=f"layer{l}")
        w_out = g.param("head.W", rng.normal(0, np.sqrt(1.0 / HIDDEN), (HIDDEN, N_CLASSES)))
        b_out = g.param("head.b", np.zeros(N_CLASSES))
        self.logits = g.add(g.matmul(h, w_out), b_out, name="logits")
        self.loss = g.cross_entropy(self.logits, self.y, name="nas_loss")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.graph.params

    @property
    def weight_names(self) -> list[str]:
        return [n for n in self.graph.params if n != "alpha"]

    def set_alpha(self, alpha: np.ndarray) -> None:
        self.graph.params["alpha"][...] = alpha

    def forward(self, x: np.ndarray, y: np.ndarray | None = None) -> de.Trace:
        if y is None:
            y = np.zeros(len(x))
        return self.graph.forward({"x": x, "y": y})

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        trace = self.forward(x, y)
        return float(trace[self.loss][0]), trace.backward(self.loss)

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        """(mean cross-entropy, classification error)."""
        trace = self.forward(x, y)
        err = float(np.mean(np.argmax(trace[self.logits], axis=1) != y))
        return float(trace[self.loss][0]), err

    def save(self, path: str | Path) -> None:
        de.save_params(self.graph.params, path)

    def load(self, path: str | Path) -> None:
        expected = {n: v.shape for n, v in self.graph.params.items()}
        for name, value in de.load_params(path, expected).items():
            self.graph.params[name][...] = value


def nas_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    return float(de._f_xent([np.asarray(logits, float), np.asarray(labels)], {})[0])
