import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coexplore import diffengine as de
from coexplore import hwmodel as hm
from coexplore.hwmodel import HwConfig
from coexplore.supernet import one_hot_encoding
from coexplore.surrogate import (Estimator, Generator, HwEncoding, NotPretrainedError, discretize,
                                 encode, estimator_predict, generator_forward, pretrain_estimator)

from conftest import cached_estimator

hw_st = st.builds(HwConfig, st.sampled_from(hm.PE_X), st.sampled_from(hm.PE_Y),
                  st.sampled_from(hm.RF_BYTES), st.sampled_from(hm.DATAFLOWS))


def test_discretize_boundaries():
    assert discretize(HwEncoding(0, 0, 0, (1, 0, 0))) == HwConfig(12, 8, 16, "WS")
    assert discretize(HwEncoding(1, 1, 1, (0, 0, 1))) == HwConfig(20, 24, 256, "RS")
    # out-of-range values clamp
    assert discretize(HwEncoding(-3, 7, 2, (0, 1, 0))) == HwConfig(12, 24, 256, "OS")


def test_discretize_rounds_half_up():
    assert discretize(HwEncoding(0.5 / 8, 0, 0, (1, 0, 0))).pe_x == 13
    assert discretize(HwEncoding(0.49 / 8, 0, 0, (1, 0, 0))).pe_x == 12


@given(hw_st)
def test_encode_discretize_roundtrip(hw):
    assert discretize(encode(hw)) == hw


@given(st.floats(-0.5, 1.5), st.floats(-0.5, 1.5), st.floats(-0.5, 1.5),
       st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
def test_discretize_idempotent(a, b, c, w):
    w = np.array(w) / np.sum(w)
    hw = discretize(HwEncoding(a, b, c, tuple(w)))
    assert discretize(encode(hw)) == hw


def test_encoding_rejects_off_simplex():
    with pytest.raises(ValueError):
        HwEncoding(0, 0, 0, (0.5, 0.6, 0.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generator_codomain(seed):
    gen = Generator(8, seed=seed)
    rng = np.random.default_rng(seed)
    arch = rng.dirichlet(np.ones(6), size=8).reshape(-1)
    enc = generator_forward(gen, arch)
    assert abs(sum(enc.df) - 1.0) <= 1e-9
    assert all(0 < v < 1 for v in (enc.px_n, enc.py_n, enc.rf_n))
    assert generator_forward(gen, arch) == enc


def test_untrained_estimator_refuses():
    with pytest.raises(NotPretrainedError):
        Estimator(8).predict_array(np.zeros(48), np.zeros(6))


def test_pretrain_rejects_small_dataset():
    with pytest.raises(ValueError, match="at least"):
        pretrain_estimator(hm.sample_pairs(100, 0))


def test_estimator_outputs_positive(quick_estimator):
    rng = np.random.default_rng(0)
    arch = rng.normal(size=(50, 48)) * 5
    hw = rng.normal(size=(50, 6)) * 5
    assert np.all(quick_estimator.predict_array(arch, hw) > 0)


def test_quick_estimator_beats_mean_baseline():
    report = cached_estimator(10_000, 3)[1]
    assert set(report["holdout_accuracy"]) == set(hm.METRIC_NAMES)
    assert report["holdout_mse"] < report["mean_baseline_mse"]


def test_latency_gradient_wrt_arch_matches_finite_differences(quick_estimator):
    est = quick_estimator
    g = de.Graph()
    arch = g.input("arch", (1, 48))
    hw = g.const("hw", encode(HwConfig(16, 16, 64, "OS")).to_vector()[None, :])
    lat = g.sum(g.take(est.attach(g, g.concat([arch, hw], axis=1)), [0], axis=1))
    a0 = np.random.default_rng(1).dirichlet(np.ones(6), size=8).reshape(1, 48)
    grad = g.forward({"arch": a0}).backward(lat, inputs=["arch"])["arch"]
    h = 1e-5
    for i in range(48):
        e = np.zeros_like(a0)
        e[0, i] = h
        up = g.forward({"arch": a0 + e})[lat][0]
        down = g.forward({"arch": a0 - e})[lat][0]
        num = (up - down) / (2 * h)
        assert abs(grad[0, i] - num) <= 1e-3 * max(abs(num), 1e-3), i


def test_save_load_roundtrip(quick_estimator, tmp_path):
    quick_estimator.save(tmp_path / "e.json")
    again = Estimator.load(tmp_path / "e.json")
    assert again.fingerprint() == quick_estimator.fingerprint()
    assert again.refs == quick_estimator.refs
    arch = one_hot_encoding([0, 1, 2, 3, 4, 5, 0, 1])
    enc = encode(HwConfig(14, 20, 32, "RS"))
    assert estimator_predict(again, arch, enc) == estimator_predict(quick_estimator, arch, enc)


def test_load_rejects_bad_header(quick_estimator, tmp_path):
    import json
    path = tmp_path / "e.json"
    quick_estimator.save(path)
    doc = json.loads(path.read_text())
    doc["norm"]["std"] = [1.0, 0.0, 1.0]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="normalization"):
        Estimator.load(path)
