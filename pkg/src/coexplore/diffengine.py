"""Reverse-mode automatic differentiation over static dense graphs.

A :class:`Graph` is built once from leaves (parameters, constants, inputs) and
primitive operations, then executed many times with :meth:`Graph.forward`.
The returned :class:`Trace` keeps every intermediate value so that
:meth:`Trace.backward` can be called for several scalar outputs of the same
forward pass.

Scalars are tensors of shape ``(1,)``. All values are float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with a node."""


@dataclass(eq=False)
class Node:
    index: int
    op: str
    parents: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str = ""

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<node {self.index} {self.op}{label}>"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Each primitive: forward(values, attrs) -> value, backward(grad, values, out, attrs) -> grads.

def _f_matmul(v, a):
    return v[0] @ v[1]


def _b_matmul(g, v, out, a):
    return g @ v[1].T, v[0].T @ g


def _f_add(v, a):
    return v[0] + v[1]


def _b_add(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _f_sub(v, a):
    return v[0] - v[1]


def _b_sub(g, v, out, a):
    return _unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)


def _f_mul(v, a):
    return v[0] * v[1]


def _b_mul(g, v, out, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _f_scale(v, a):
    return v[0] * a["c"]


def _b_scale(g, v, out, a):
    return (g * a["c"],)


def _f_relu(v, a):
    return np.maximum(v[0], 0.0)


def _b_relu(g, v, out, a):
    # subgradient 0 at exactly 0
    return (g * (v[0] > 0.0),)


def _f_sigmoid(v, a):
    return _sigmoid(v[0])


def _b_sigmoid(g, v, out, a):
    return (g * out * (1.0 - out),)


def _f_exp(v, a):
    return np.exp(v[0])


def _b_exp(g, v, out, a):
    return (g * out,)


def _f_log(v, a):
    return np.log(v[0])


def _b_log(g, v, out, a):
    return (g / v[0],)


def _f_softmax(v, a):
    return _softmax(v[0])


def _b_softmax(g, v, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _f_concat(v, a):
    return np.concatenate(v, axis=a["axis"])


def _b_concat(g, v, out, a):
    axis = a["axis"]
    splits = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _f_sum(v, a):
    axis = a["axis"]
    if axis is None:
        return np.array([v[0].sum()])
    return v[0].sum(axis=axis)


def _b_sum(g, v, out, a):
    axis = a["axis"]
    shape = v[0].shape
    if axis is None:
        return (np.full(shape, g[0]),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _f_take(v, a):
    return np.take(v[0], a["indices"], axis=a["axis"])


def _b_take(g, v, out, a):
    grad = np.zeros_like(v[0])
    idx = [slice(None)] * v[0].ndim
    idx[a["axis"]] = a["indices"]
    np.add.at(grad, tuple(idx), g)
    return (grad,)


def _f_reshape(v, a):
    return v[0].reshape(a["shape"])


def _b_reshape(g, v, out, a):
    return (g.reshape(v[0].shape),)


def _f_xent(v, a):
    logits, labels = v
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(logits.shape[0])
    return np.array([-logp[rows, labels.astype(np.int64)].mean()])


def _b_xent(g, v, out, a):
    logits, labels = v
    n = logits.shape[0]
    grad = _softmax(logits)
    grad[np.arange(n), labels.astype(np.int64)] -= 1.0
    return grad * (g[0] / n), None


_PRIMS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_f_matmul, _b_matmul),
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "scale": (_f_scale, _b_scale),
    "relu": (_f_relu, _b_relu),
    "sigmoid": (_f_sigmoid, _b_sigmoid),
    "exp": (_f_exp, _b_exp),
    "log": (_f_log, _b_log),
    "softmax": (_f_softmax, _b_softmax),
    "concat": (_f_concat, _b_concat),
    "sum": (_f_sum, _b_sum),
    "take": (_f_take, _b_take),
    "reshape": (_f_reshape, _b_reshape),
    "xent": (_f_xent, _b_xent),
}

_LEAVES = ("param", "const", "input")


class Graph:
    """A static computation graph.

    Parameter values live in :attr:`params` and are read at every forward
    pass, so optimizers may update them in place between passes.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.consts: dict[str, np.ndarray] = {}
        self._leaf_nodes: dict[str, Node] = {}

    # -- leaves -----------------------------------------------------------

    def _leaf(self, op: str, name: str, **attrs) -> Node:
        if name in self._leaf_nodes:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = Node(len(self.nodes), op, (), attrs, name)
        self.nodes.append(node)
        self._leaf_nodes[name] = node
        return node

    def param(self, name: str, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self.params[name] = value
        return self._leaf("param", name)

    def const(self, name: str, value) -> Node:
        """A frozen leaf: read at forward time, never differentiated."""
        self.consts[name] = np.asarray(value, dtype=np.float64)
        return self._leaf("const", name)

    def input(self, name: str, shape: Sequence[int | None]) -> Node:
        """An input leaf; ``None`` entries in ``shape`` accept any size."""
        return self._leaf("input", name, shape=tuple(shape))

    def leaf(self, name: str) -> Node:
        return self._leaf_nodes[name]

    # -- primitives -------------------------------------------------------

    def _op(self, op: str, parents: Iterable[Node], name: str = "", **attrs) -> Node:
        node = Node(len(self.nodes), op, tuple(p.index for p in parents), attrs, name)
        self.nodes.append(node)
        return node

    def matmul(self, a: Node, b: Node, name: str = "") -> Node:
        return self._op("matmul", (a, b), name)

    def add(self, a: Node, b: Node, name: str = "") -> Node:
        return self._op("add", (a, b), name)

    def sub(self, a: Node, b: Node, name: str = "") -> Node:
        return self._op("sub", (a, b), name)

    def mul(self, a: Node, b: Node, name: str = "") -> Node:
        return self._op("mul", (a, b), name)

    def scale(self, a: Node, c: float, name: str = "") -> Node:
        return self._op("scale", (a,), name, c=float(c))

    def relu(self, a: Node, name: str = "") -> Node:
        return self._op("relu", (a,), name)

    def sigmoid(self, a: Node, name: str = "") -> Node:
        return self._op("sigmoid", (a,), name)

    def exp(self, a: Node, name: str = "") -> Node:
        return self._op("exp", (a,), name)

    def log(self, a: Node, name: str = "") -> Node:
        return self._op("log", (a,), name)

    def softmax(self, a: Node, name: str = "") -> Node:
        """Softmax along the last axis."""
        return self._op("softmax", (a,), name)

    def concat(self, nodes: Sequence[Node], axis: int = -1, name: str = "") -> Node:
        return self._op("concat", tuple(nodes), name, axis=axis)

    def sum(self, a: Node, axis: int | None = None, name: str = "") -> Node:
        """Reduce-sum; ``axis=None`` gives a shape ``(1,)`` scalar."""
        return self._op("sum", (a,), name, axis=axis)

    def take(self, a: Node, indices, axis: int = -1, name: str = "") -> Node:
        return self._op("take", (a,), name, indices=indices, axis=axis)

    def reshape(self, a: Node, shape: Sequence[int], name: str = "") -> Node:
        return self._op("reshape", (a,), name, shape=tuple(shape))

    def cross_entropy(self, logits: Node, labels: Node, name: str = "") -> Node:
        """Mean softmax cross-entropy of ``(n, k)`` logits against integer labels."""
        return self._op("xent", (logits, labels), name)

    # -- execution --------------------------------------------------------

    def forward(self, inputs: dict[str, np.ndarray] | None = None,
                upto: Node | None = None) -> "Trace":
        """Evaluate every node (or every node up to ``upto``)."""
        inputs = inputs or {}
        last = len(self.nodes) if upto is None else upto.index + 1
        values: list[np.ndarray | None] = [None] * last
        for node in self.nodes[:last]:
            if node.op == "param":
                values[node.index] = self.params[node.name]
            elif node.op == "const":
                values[node.index] = self.consts[node.name]
            elif node.op == "input":
                if node.name not in inputs:
                    raise KeyError(f"missing input for {node!r}")
                value = np.asarray(inputs[node.name], dtype=np.float64)
                declared = node.attrs["shape"]
                if len(declared) != value.ndim or any(
                    d is not None and d != s for d, s in zip(declared, value.shape)
                ):
                    raise ShapeError(
                        f"{node!r}: expected shape {declared}, got {value.shape}"
                    )
                values[node.index] = value
            else:
                fwd = _PRIMS[node.op][0]
                args = [values[i] for i in node.parents]
                try:
                    values[node.index] = fwd(args, node.attrs)
                except ValueError as exc:
                    shapes = [x.shape for x in args]
                    raise ShapeError(f"{node!r} with input shapes {shapes}: {exc}") from exc
        return Trace(self, values)


class Trace:
    """Values of one forward pass; supports repeated backward passes."""

    def __init__(self, graph: Graph, values: list) -> None:
        self.graph = graph
        self.values = values

    def __getitem__(self, node: Node) -> np.ndarray:
        return self.values[node.index]

    def backward(self, output: Node, inputs: Sequence[str] = ()) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``output`` w.r.t. every parameter leaf.

        Input leaves listed in ``inputs`` are differentiated too. Parameters
        that ``output`` does not depend on get zero gradients.
        """
        out = self.values[output.index]
        if out is None or out.shape != (1,):
            shape = None if out is None else out.shape
            raise ShapeError(f"backward needs a shape (1,) output, {output!r} has {shape}")
        nodes = self.graph.nodes[: output.index + 1]
        wanted = set(inputs)
        needs = [False] * len(nodes)
        for node in nodes:
            if node.op == "param" or (node.op == "input" and node.name in wanted):
                needs[node.index] = True
            elif node.op not in _LEAVES:
                needs[node.index] = any(needs[i] for i in node.parents)

        grads: list[np.ndarray | None] = [None] * len(nodes)
        grads[output.index] = np.ones(1)
        for node in reversed(nodes):
            g = grads[node.index]
            if g is None or node.op in _LEAVES or not needs[node.index]:
                continue
            bwd = _PRIMS[node.op][1]
            pvals = [self.values[i] for i in node.parents]
            pgrads = bwd(g, pvals, self.values[node.index], node.attrs)
            for i, pg in zip(node.parents, pgrads):
                if pg is None or not needs[i]:
                    continue
                grads[i] = pg if grads[i] is None else grads[i] + pg

        result: dict[str, np.ndarray] = {}
        for node in self.graph.nodes:
            if node.op == "param":
                g = grads[node.index] if node.index < len(grads) else None
                result[node.name] = np.zeros_like(self.graph.params[node.name]) if g is None else g
            elif node.op == "input" and node.name in wanted:
                g = grads[node.index] if node.index < len(grads) else None
                result[node.name] = np.zeros_like(self.values[node.index]) if g is None else g
        return result


def forward(graph: Graph, inputs: dict[str, np.ndarray] | None = None) -> Trace:
    return graph.forward(inputs)


def backward(trace: Trace, output: Node) -> dict[str, np.ndarray]:
    return trace.backward(output)


@dataclass
class GradCheckReport:
    """Per-parameter max relative deviation between analytic and numeric gradients.

    The deviation of one entry is ``|a - n| / max(|n|, floor)``; with the
    default floor of 1e-2 a deviation ``<= 1e-4`` is the mixed tolerance
    ``max(1e-4 * |g|, 1e-6)``.
    """

    deviations: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(d <= self.tolerance for d in self.deviations.values())

    @property
    def worst(self) -> float:
        return max(self.deviations.values(), default=0.0)


def grad_check(graph: Graph, output: Node, inputs: dict[str, np.ndarray] | None = None,
               tolerance: float = 1e-4, step: float = 1e-4, floor: float = 1e-2,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare :meth:`Trace.backward` against central finite differences.

    Only parameter leaves are checked; constants and inputs are excluded.
    ``max_entries`` caps the number of (seeded, randomly chosen) entries
    probed per parameter.
    """
    analytic = graph.forward(inputs).backward(output)
    rng = np.random.default_rng(seed)
    deviations: dict[str, float] = {}
    for name, value in graph.params.items():
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = graph.forward(inputs, upto=output)[output][0]
            flat[i] = orig - step
            down = graph.forward(inputs, upto=output)[output][0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            dev = abs(ga[i] - numeric) / max(abs(numeric), floor)
            worst = max(worst, dev)
        deviations[name] = float(worst)
    return GradCheckReport(deviations, tolerance)


# -- parameter snapshots ----------------------------------------------------

def params_to_json(params: dict[str, np.ndarray]) -> list[dict]:
    return [
        {"name": name, "shape": list(value.shape), "values": value.reshape(-1).tolist()}
        for name, value in params.items()
    ]


def params_from_json(entries: list[dict],
                     expected: dict[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Inverse of :func:`params_to_json`; validates shapes and value counts."""
    params: dict[str, np.ndarray] = {}
    for entry in entries:
        name, shape, values = entry["name"], tuple(entry["shape"]), entry["values"]
        if any(not isinstance(d, int) or d <= 0 for d in shape):
            raise ShapeError(f"parameter {name!r}: invalid shape {shape}")
        if int(np.prod(shape)) != len(values):
            raise ShapeError(f"parameter {name!r}: {len(values)} values for shape {shape}")
        if expected is not None and expected.get(name) != shape:
            raise ShapeError(f"parameter {name!r}: expected shape {expected.get(name)}, got {shape}")
        arr = np.asarray(values, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        params[name] = arr
    if expected is not None and set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        raise ShapeError(f"snapshot missing parameters {missing}")
    return params


def save_params(params: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path: str | Path,
                expected: dict[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    return params_from_json(json.loads(Path(path).read_text()), expected)


class Adam:
    """Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 names: Iterable[str] | None = None) -> None:
        self.params = params
        self.names = list(names) if names is not None else list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[n] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
