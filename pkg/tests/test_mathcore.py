import math

import numpy as np
import pytest

from rgae.mathcore import (LrSchedule, RmsPropState, clip_by_global_norm, global_norm, glorot_uniform, log2_clamped,
                           make_rng, rmsprop_step, sigmoid, softmax, softplus)


def test_softplus_values_and_stability():
    assert softplus(0.0) == pytest.approx(math.log(2))
    x = np.array([-800.0, -30.0, 0.5, 30.0, 800.0])
    ref = np.array([0.0, math.log1p(math.exp(-30)), math.log1p(math.exp(0.5)), 30 + math.log1p(math.exp(-30)), 800])
    assert np.allclose(softplus(x), ref, rtol=1e-12, atol=1e-300)


def test_sigmoid_stable_and_keeps_dtype():
    x = np.array([-1000, -2, 0, 2, 1000], dtype=np.float32)
    out = sigmoid(x)
    assert out.dtype == np.float32
    assert np.allclose(out, [0, 1 / (1 + math.e**2), 0.5, 1 / (1 + math.e**-2), 1], atol=1e-7)


def test_softmax_sums_to_one_and_is_shift_invariant():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 7)) * 50
    p = softmax(x)
    assert np.allclose(p.sum(-1), 1, atol=1e-12)
    assert np.allclose(softmax(x + 1000), p)


def test_log2_clamped():
    assert log2_clamped(0.125) == -3.0
    assert log2_clamped(0.0) == pytest.approx(math.log2(1e-12))


def test_make_rng_streams():
    a = make_rng(1, 2).random(3)
    assert np.array_equal(a, make_rng(1, 2).random(3))
    assert not np.array_equal(a, make_rng(1, 3).random(3))
    assert not np.array_equal(a, make_rng(2, 2).random(3))


def test_glorot_bounds():
    w = glorot_uniform(make_rng(0), (30, 20), gain=2.0)
    bound = 2.0 * math.sqrt(6 / 50)
    assert w.shape == (30, 20) and np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound


def test_lr_schedule_linear_to_zero():
    s = LrSchedule(0.001, 50)
    assert s.rate(0) == 0.001
    assert s.rate(25) == pytest.approx(0.0005)
    assert s.rate(49) == pytest.approx(0.001 / 50)
    assert s.rate(50) == 0.0 and s.rate(60) == 0.0
    with pytest.raises(ValueError):
        LrSchedule(0.0, 5)
    with pytest.raises(ValueError):
        LrSchedule(0.1, 0)


def test_rmsprop_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0]), "frozen": np.array([5.0])}
    g = {"w": np.array([0.5, -4.0])}
    st = RmsPropState.for_params(p)
    rmsprop_step(p, g, st, 0.1)
    acc = 0.1 * np.array([0.25, 16.0])
    assert np.allclose(st.accumulators["w"], acc)
    assert np.allclose(p["w"], [1.0, -2.0] - 0.1 * np.array([0.5, -4.0]) / (np.sqrt(acc) + 1e-8))
    assert p["frozen"][0] == 5.0
    rmsprop_step(p, g, st, 0.1)
    assert np.allclose(st.accumulators["w"], 0.9 * acc + 0.1 * np.array([0.25, 16.0]))


def test_rmsprop_shape_checks():
    p = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        rmsprop_step(p, {"w": np.zeros(2)}, RmsPropState.for_params(p), 0.1)
    with pytest.raises(ValueError):
        rmsprop_step(p, {"w": np.zeros(3)}, RmsPropState(accumulators={"w": np.zeros(4)}), 0.1)


def test_global_norm_clipping():
    g = {"a": np.array([3.0]), "b": np.array([[4.0]])}
    assert global_norm(g) == 5.0
    assert clip_by_global_norm(g, 10.0) == 5.0 and g["a"][0] == 3.0
    clip_by_global_norm(g, 1.0)
    assert global_norm(g) == pytest.approx(1.0)
    assert g["a"][0] / g["b"][0, 0] == pytest.approx(0.75)
