import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coexplore import diffengine as de
from coexplore.surrogate import attach_mlp, init_mlp


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar f at array x (x is perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def assert_mixed_close(analytic, numeric):
    tol = np.maximum(1e-4 * np.abs(numeric), 1e-6)
    assert np.all(np.abs(analytic - numeric) <= tol), np.max(np.abs(analytic - numeric) - tol)


def _away_from_zero(rng, shape, eps=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < eps, np.sign(x + 1e-12) * eps, x)


# builders: rng -> (graph, scalar output)
def _unary(op, positive=False):
    def build(rng):
        g = de.Graph()
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        x = rng.uniform(0.2, 2.0, shape) if positive else _away_from_zero(rng, shape)
        a = g.param("a", x)
        w = g.const("w", rng.normal(size=shape))
        return g, g.sum(g.mul(getattr(g, op)(a), w))
    return build


def _binary(op):
    def build(rng):
        g = de.Graph()
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        a = g.param("a", rng.normal(size=(n, m)))
        # second operand broadcasts over rows half of the time
        b = g.param("b", rng.normal(size=(m,) if rng.random() < 0.5 else (n, m)))
        w = g.const("w", rng.normal(size=(n, m)))
        return g, g.sum(g.mul(getattr(g, op)(a, b), w))
    return build


def _matmul(rng):
    g = de.Graph()
    n, k, m = (int(v) for v in rng.integers(1, 5, 3))
    a = g.param("a", rng.normal(size=(n, k)))
    b = g.param("b", rng.normal(size=(k, m)))
    w = g.const("w", rng.normal(size=(n, m)))
    return g, g.sum(g.mul(g.matmul(a, b), w))


def _softmax(rng):
    g = de.Graph()
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)))
    a = g.param("a", rng.normal(size=shape) * 2)
    w = g.const("w", rng.normal(size=shape))
    return g, g.sum(g.mul(g.softmax(a), w))


def _concat(rng):
    g = de.Graph()
    n = int(rng.integers(1, 4))
    a = g.param("a", rng.normal(size=(n, 2)))
    b = g.param("b", rng.normal(size=(n, 3)))
    w = g.const("w", rng.normal(size=(n, 5)))
    return g, g.sum(g.mul(g.concat([a, b]), w))


def _scale(rng):
    g = de.Graph()
    a = g.param("a", rng.normal(size=(3,)))
    w = g.const("w", rng.normal(size=(3,)))
    return g, g.sum(g.mul(g.scale(a, float(rng.normal())), w))


def _sum_axis(rng):
    g = de.Graph()
    a = g.param("a", rng.normal(size=(3, 4)))
    w = g.const("w", rng.normal(size=(4,)))
    return g, g.sum(g.mul(g.sum(a, axis=0), w))


def _take_reshape(rng):
    g = de.Graph()
    a = g.param("a", rng.normal(size=(3, 4)))
    t = g.take(a, [0, 2, 2], axis=1)
    w = g.const("w", rng.normal(size=(9,)))
    return g, g.sum(g.mul(g.reshape(t, (9,)), w))


def _xent(rng):
    g = de.Graph()
    n = int(rng.integers(1, 6))
    logits = g.param("logits", rng.normal(size=(n, 4)) * 2)
    labels = g.input("y", (None,))
    return g, g.cross_entropy(logits, labels), {"y": rng.integers(0, 4, n)}


BUILDERS = {
    "relu": _unary("relu"),
    "sigmoid": _unary("sigmoid"),
    "exp": _unary("exp"),
    "log": _unary("log", positive=True),
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "matmul": _matmul,
    "softmax": _softmax,
    "concat": _concat,
    "scale": _scale,
    "sum": _sum_axis,
    "take+reshape": _take_reshape,
    "cross_entropy": _xent,
}


@pytest.mark.parametrize("prim", sorted(BUILDERS))
def test_primitive_matches_finite_differences(prim):
    rng = np.random.default_rng(zlib.crc32(prim.encode()))
    for _ in range(100):
        built = BUILDERS[prim](rng)
        g, out = built[0], built[1]
        feed = built[2] if len(built) > 2 else None
        analytic = g.forward(feed).backward(out)
        for name, value in g.params.items():
            numeric = numeric_grad(lambda: g.forward(feed)[out][0], value)
            assert_mixed_close(analytic[name], numeric)


def test_forward_examples():
    g = de.Graph()
    x = g.input("x", (3,))
    r = g.relu(x)
    s = g.softmax(g.scale(x, 0.0))
    tr = g.forward({"x": np.array([-1.0, 0.0, 2.0])})
    assert tr[r].tolist() == [0.0, 0.0, 2.0]
    np.testing.assert_allclose(tr[s], [1 / 3] * 3, rtol=0, atol=1e-15)

    g = de.Graph()
    a = g.const("a", [[1.0, 2.0]])
    b = g.const("b", [[3.0], [4.0]])
    mm = g.matmul(a, b)
    assert g.forward()[mm].tolist() == [[11.0]]


def test_backward_examples():
    g = de.Graph()
    x = g.param("x", [2.0])
    y = g.scale(x, 3.0)
    assert g.forward().backward(y)["x"].tolist() == [3.0]
    g = de.Graph()
    x = g.param("x", [2.0])
    y = g.mul(x, x)
    assert g.forward().backward(y)["x"].tolist() == [4.0]


def test_shape_mismatch_names_node():
    g = de.Graph()
    a = g.param("a", np.ones((2, 3)))
    b = g.param("b", np.ones((2, 3)))
    g.matmul(a, b, name="bad_mm")
    with pytest.raises(de.ShapeError, match="bad_mm"):
        g.forward()


def test_input_shape_checked():
    g = de.Graph()
    g.input("x", (None, 4))
    with pytest.raises(de.ShapeError, match="'x'"):
        g.forward({"x": np.ones((2, 5))})


def test_backward_rejects_non_scalar():
    g = de.Graph()
    a = g.param("a", np.ones(3))
    r = g.relu(a)
    with pytest.raises(de.ShapeError):
        g.forward().backward(r)


def test_residual_mlp_gradient():
    rng = np.random.default_rng(5)
    weights = init_mlp(6, 8, 3, seed=1)
    g = de.Graph()
    x = g.input("x", (None, 6))
    t = g.input("t", (None, 3))
    out = attach_mlp(g, x, weights, "", frozen=False)
    d = g.sub(out, t)
    loss = g.sum(g.mul(d, d))
    feed = {"x": rng.normal(size=(5, 6)), "t": rng.normal(size=(5, 3))}
    analytic = g.forward(feed).backward(loss)
    for name, value in g.params.items():
        numeric = numeric_grad(lambda: g.forward(feed)[loss][0], value)
        err = np.abs(analytic[name] - numeric) / np.maximum(np.abs(numeric), 1e-2)
        assert err.max() <= 1e-4, name


def test_grad_check_softmax_xent_head():
    rng = np.random.default_rng(0)
    g = de.Graph()
    x = g.input("x", (None, 5))
    y = g.input("y", (None,))
    w = g.param("w", rng.normal(size=(5, 4)))
    loss = g.cross_entropy(g.softmax(g.matmul(x, w)), y)
    report = de.grad_check(g, loss, {"x": rng.normal(size=(7, 5)), "y": rng.integers(0, 4, 7)})
    assert report.passed and report.worst <= 1e-4


def test_grad_check_identity_and_frozen_leaf():
    g = de.Graph()
    x = g.param("x", [0.0])
    g.const("c", [2.0])
    report = de.grad_check(g, x)
    assert report.deviations == {"x": 0.0}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    rng = np.random.default_rng(seed)
    g = de.Graph()
    a = g.param("a", rng.normal(size=(3, 4)))
    w1 = g.const("w1", rng.normal(size=(4, 2)))
    f1 = g.sum(g.sigmoid(g.matmul(a, w1)))
    f2 = g.sum(g.mul(g.relu(a), a))
    total = g.add(f1, f2)
    tr = g.forward()
    np.testing.assert_allclose(tr.backward(total)["a"], tr.backward(f1)["a"] + tr.backward(f2)["a"],
                               rtol=0, atol=1e-12)


def test_repeated_passes_bit_identical():
    weights = init_mlp(10, 16, 3, seed=2)
    g = de.Graph()
    x = g.input("x", (None, 10))
    out = g.sum(attach_mlp(g, x, weights, "", frozen=False))
    feed = {"x": np.random.default_rng(1).normal(size=(4, 10))}
    t1, t2 = g.forward(feed), g.forward(feed)
    assert t1[out].tobytes() == t2[out].tobytes()
    g1, g2 = t1.backward(out), t2.backward(out)
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)


def test_param_snapshot_roundtrip(tmp_path):
    params = {"a": np.arange(6.0).reshape(2, 3) / 7, "b": np.array([np.pi])}
    path = tmp_path / "p.json"
    de.save_params(params, path)
    loaded = de.load_params(path, {"a": (2, 3), "b": (1,)})
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params)
    doc = json.loads(path.read_text())
    assert doc[0] == {"name": "a", "shape": [2, 3], "values": params["a"].reshape(-1).tolist()}


def test_param_snapshot_rejects_bad_shape(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps([{"name": "a", "shape": [2, 2], "values": [1.0, 2.0, 3.0]}]))
    with pytest.raises(de.ShapeError):
        de.load_params(path)
    de.save_params({"a": np.ones((2, 2))}, path)
    with pytest.raises(de.ShapeError):
        de.load_params(path, {"a": (4,)})
