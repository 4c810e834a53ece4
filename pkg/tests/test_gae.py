import math

import numpy as np
import pytest

from conftest import random_gae
from oracles import _softplus, oracle_mapping, oracle_pretrain_loss, oracle_reconstruct, oracle_shift
from rgae.data import FrameSequence
from rgae.gae import (GaeParams, GaePretrainConfig, binary_cross_entropy, cap_column_norms, column_norms,
                      infer_mapping, invariance_scores, pretrain, pretrain_loss_and_grads, pretrain_step, reconstruct,
                      regularization_terms, shift, shift_pitch)
from rgae.mathcore import RmsPropState, make_rng


def random_pair(rng, n, M):
    ctx = np.eye(M)[rng.integers(0, M, n)]
    x = np.eye(M)[rng.integers(0, M)]
    return ctx, x


# -- inference -----------------------------------------------------------------------

def test_zero_params_mapping_is_softplus_zero():
    p = GaeParams.zeros(2, 4, 3, 5)
    m = infer_mapping(np.eye(4)[[0, 1]], np.eye(4)[2], p)
    assert np.allclose(m, math.log(2), atol=1e-12)


def test_zero_mapping_gives_half():
    p = random_gae(1, 3, 2, 2, seed=0)
    assert np.allclose(reconstruct(np.eye(3)[[1]], np.zeros(2), p, "sigmoid"), 0.5)


def test_hand_set_tiny_instance():
    p = GaeParams(Q=np.array([[1.0, -1.0, 0.5], [0.0, 2.0, 1.0]]), V=np.array([[0.5, 1.0, -1.0], [1.0, 0.0, 2.0]]),
                  W_m=np.array([[1.0, 0.5], [-1.0, 1.0]]), n=1)
    ctx, x = np.array([[0.0, 1.0, 0.0]]), np.array([0.0, 0.0, 1.0])
    # factors: (Q ctx) * (V x) = [-1, 2] * [-1, 2] = [1, 4]; pre-activations [3, 3]
    assert np.allclose(infer_mapping(ctx, x, p), [_softplus(3.0)] * 2, atol=1e-12)
    assert np.allclose(infer_mapping(ctx, x, p), oracle_mapping(p, ctx, x), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("output", ["sigmoid", "softmax"])
def test_inference_matches_oracle(seed, output):
    rng = make_rng(seed, 9)
    n, M, F, K = (int(v) for v in rng.integers(1, 5, 4))
    p = random_gae(n, M, F, K, seed)
    ctx = rng.random((n, M))
    x = rng.random(M)
    m = infer_mapping(ctx, x, p)
    assert np.max(np.abs(m - oracle_mapping(p, ctx, x))) < 1e-9
    assert np.all(m > 0)
    mm = rng.random(K)
    r = reconstruct(ctx, mm, p, output)
    assert np.max(np.abs(r - oracle_reconstruct(p, ctx, mm, output))) < 1e-9


def test_batched_inference_equals_single():
    rng = make_rng(3)
    p = random_gae(3, 4, 3, 2, seed=3)
    ctx = rng.random((5, 3, 4))
    x = rng.random((5, 4))
    batched = infer_mapping(ctx, x, p)
    for i in range(5):
        assert np.allclose(batched[i], infer_mapping(ctx[i], x[i], p), atol=1e-12)


def test_softmax_output_sums_to_one():
    p = random_gae(2, 4, 3, 2, seed=1)
    r = reconstruct(np.eye(4)[[0, 3]], np.ones(2), p, "softmax")
    assert abs(r.sum() - 1) < 1e-12


def test_dimension_mismatch_rejected():
    p = random_gae(2, 4, 3, 2, seed=1)
    with pytest.raises(ValueError):
        infer_mapping(np.zeros((3, 4)), np.zeros(4), p)
    with pytest.raises(ValueError):
        infer_mapping(np.zeros((2, 4)), np.zeros(5), p)
    with pytest.raises(ValueError):
        reconstruct(np.zeros((2, 4)), np.zeros(3), p)
    with pytest.raises(ValueError):
        reconstruct(np.zeros((2, 4)), np.zeros(2), p, output="tanh")
    with pytest.raises(ValueError):
        GaeParams(np.zeros((3, 8)), np.zeros((3, 5)), np.zeros((2, 3)), 2)


# -- shift and losses -----------------------------------------------------------------

def test_shift_examples():
    assert shift(np.array([1, 0, 0, 0]), 0).tolist() == [1, 0, 0, 0]
    assert shift(np.array([1, 0, 0, 0]), 1).tolist() == [0, 0, 0, 1]
    assert shift(np.array([0, 0, 1, 0]), 7).tolist() == oracle_shift([0, 0, 1, 0], 7)


def test_shift_inverse_and_window():
    rng = np.random.default_rng(0)
    x = rng.random((3, 5, 9))
    for d in (-40, -3, 0, 4, 18):
        assert np.array_equal(shift(shift(x, d), -d), x)
        out = shift(x, d)
        for b in range(3):
            for t in range(5):
                assert np.array_equal(out[b, t], oracle_shift(list(x[b, t]), d))


def test_shift_pitch_agrees_with_shift():
    for d in (-7, 0, 3, 70):
        for p in range(6):
            assert np.argmax(shift(np.eye(6)[p], d)) == shift_pitch(p, d, 6)


def test_bce_examples():
    assert binary_cross_entropy([1, 0], [0.5, 0.5]) == pytest.approx(1.0)
    assert binary_cross_entropy([0.5, 0.5], [0.5, 0.5]) == pytest.approx(1.0)
    v = binary_cross_entropy([1, 0, 0, 0], [0.97, 0.01, 0.01, 0.01])
    ref = -(math.log2(0.97) + 3 * math.log2(0.99)) / 4
    assert v == pytest.approx(ref, abs=1e-12)
    assert round(v, 4) == 0.0219


def test_bce_clamps():
    assert np.isfinite(binary_cross_entropy([1, 0], [0.0, 1.0]))
    assert binary_cross_entropy([1, 0], [1.0, 0.0]) >= 0


def test_regularization_examples():
    cfg = GaePretrainConfig(sparsity_target=0.05, sparsity_weight=0.1, norm_deviation_weight=0.1)
    p = GaeParams(Q=np.ones((2, 4)), V=np.full((2, 4), 2.0), W_m=np.ones((2, 2)), n=1)
    sp, dev = regularization_terms(p, np.full((7, 2), 0.05), cfg)
    assert sp == pytest.approx(0.0, abs=1e-15) and dev == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_regularization_matches_oracle(seed):
    rng = make_rng(seed, 4)
    p = random_gae(2, 3, 4, 3, seed)
    maps = rng.random((6, 3))
    cfg = GaePretrainConfig(sparsity_target=0.2, sparsity_weight=0.3, norm_deviation_weight=0.7)
    sp, dev = regularization_terms(p, maps, cfg)
    ref_sp = 0.3 * sum((maps[:, k].mean() - 0.2) ** 2 for k in range(3))
    ref_dev = 0.0
    for A in (p.Q, p.V):
        norms = [math.sqrt(sum(v * v for v in A[:, c])) for c in range(A.shape[1])]
        ref_dev += sum((x - sum(norms) / len(norms)) ** 2 for x in norms)
    assert sp == pytest.approx(ref_sp, abs=1e-12) and dev == pytest.approx(0.7 * ref_dev, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pretrain_loss_matches_oracle(seed):
    rng = make_rng(seed, 6)
    n, M, F, K = 2, 4, 3, 2
    p = random_gae(n, M, F, K, seed)
    pairs = [random_pair(rng, n, M) for _ in range(3)]
    ctx = np.stack([c for c, _ in pairs])
    tgt = np.stack([x for _, x in pairs])
    cfg = GaePretrainConfig(sparsity_weight=0.2, norm_deviation_weight=0.05)
    delta = int(rng.integers(-30, 31))
    loss, _ = pretrain_loss_and_grads(p, ctx, tgt, delta, cfg)
    assert loss == pytest.approx(oracle_pretrain_loss(p, ctx, tgt, delta, cfg), abs=1e-9)


def test_zero_delta_is_plain_prediction():
    rng = make_rng(2)
    p = random_gae(2, 4, 3, 2, seed=2)
    ctx = np.eye(4)[rng.integers(0, 4, (3, 2))]
    tgt = np.eye(4)[rng.integers(0, 4, 3)]
    cfg = GaePretrainConfig(sparsity_weight=0.0, norm_deviation_weight=0.0)
    loss, _ = pretrain_loss_and_grads(p, ctx, tgt, 0, cfg)
    recon = reconstruct(ctx, infer_mapping(ctx, tgt, p), p)
    assert loss == pytest.approx(binary_cross_entropy(tgt, recon), abs=1e-12)


# -- constraints and training -----------------------------------------------------------

def test_norm_cap_projection():
    rng = np.random.default_rng(0)
    p = GaeParams(Q=rng.normal(0, 3, (5, 6)), V=rng.normal(0, 3, (5, 3)), W_m=rng.normal(size=(2, 5)), n=2)
    small = column_norms(p.Q) < 1.0
    before = p.Q[:, small].copy()
    cap_column_norms(p, 1.0)
    assert column_norms(p.Q).max() <= 1.0 + 1e-9 and column_norms(p.V).max() <= 1.0 + 1e-9
    assert np.array_equal(p.Q[:, small], before)


def test_config_validation():
    with pytest.raises(ValueError):
        GaePretrainConfig(delta_range=(-3, 5))
    with pytest.raises(ValueError):
        GaePretrainConfig(dropout_rate=1.0)


def test_pretrain_step_rejects_empty_batch():
    p = random_gae(1, 3, 2, 2, 0)
    with pytest.raises(ValueError):
        pretrain_step((np.zeros((0, 1, 3)), np.zeros((0, 3))), p, GaePretrainConfig(), RmsPropState.for_params(
            p.tensors()), make_rng(0), 0.1)


def test_pretrain_step_caps_norms():
    p = GaeParams.init(2, 6, 8, 4, seed=0, dtype=np.float64, gain=5.0)
    cfg = GaePretrainConfig(norm_cap=0.5)
    rng = make_rng(1)
    ctx = np.eye(6)[rng.integers(0, 6, (4, 2))]
    tgt = np.eye(6)[rng.integers(0, 6, 4)]
    pretrain_step((ctx, tgt), p, cfg, RmsPropState.for_params(p.tensors()), rng, 0.01)
    assert column_norms(p.Q).max() <= 0.5 + 1e-9 and column_norms(p.V).max() <= 0.5 + 1e-9


def toy_corpus(n_seq=12, length=24, M=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_seq):
        start, step = int(rng.integers(M)), int(rng.choice([1, 2, -1]))
        out.append(FrameSequence.from_pitches([(start + step * t) % M for t in range(length)], M))
    return out


def test_pretrain_reduces_loss_and_is_deterministic():
    corpus = toy_corpus()
    cfg = GaePretrainConfig(epochs=8, learning_rate=0.01, sparsity_weight=0.001, norm_deviation_weight=0.001,
                            norm_cap=10.0, batch_size=16, delta_range=(-6, 6), seed=3)
    runs = []
    for _ in range(2):
        p = GaeParams.init(2, 12, 24, 8, seed=1, gain=3.0)
        st = pretrain(corpus, p, cfg)
        runs.append(st)
    assert runs[0].trace[-1] < runs[0].trace[0]
    assert runs[0].trace == runs[1].trace
    assert all(np.array_equal(a, b) for a, b in zip(runs[0].params.tensors().values(),
                                                     runs[1].params.tensors().values()))


def test_pretrain_resume_matches_uninterrupted():
    corpus = toy_corpus(6, 12)
    cfg = GaePretrainConfig(epochs=4, learning_rate=0.01, batch_size=8, seed=5)
    full = pretrain(corpus, GaeParams.init(2, 12, 6, 4, seed=0), cfg)
    part = pretrain(corpus, GaeParams.init(2, 12, 6, 4, seed=0), cfg, stop_after=2)
    assert part.epoch == 2
    done = pretrain(corpus, part.params, cfg, state=part)
    assert done.trace == full.trace
    assert all(np.array_equal(a, b) for a, b in zip(full.params.tensors().values(), done.params.tensors().values()))


def test_pretrain_rejects_short_or_empty_corpus():
    p = GaeParams.init(4, 12, 6, 4)
    with pytest.raises(ValueError):
        pretrain([], p, GaePretrainConfig())
    with pytest.raises(ValueError):
        pretrain(toy_corpus(2, 4), p, GaePretrainConfig())


def test_invariance_scores_constant_mapping():
    # all-zero weights give the same mapping softplus(0) for every pair
    params = GaeParams.zeros(2, 6, 3, 2)
    seqs = [np.eye(6)[[0, 1, 2, 3, 4, 5, 0, 2]] for _ in range(2)]
    inv, unrel = invariance_scores(params, seqs, n_pairs=20, seed=1)
    assert inv == pytest.approx(1.0) and unrel == pytest.approx(1.0)


def test_invariance_scores_deterministic_and_bounded():
    params = random_gae(2, 6, 4, 3, seed=2)
    seqs = [np.eye(6)[make_rng(s).integers(0, 6, 12)] for s in range(3)]
    a = invariance_scores(params, seqs, n_pairs=50, seed=3)
    assert a == invariance_scores(params, seqs, n_pairs=50, seed=3)
    assert all(-1 <= v <= 1 for v in a)
    with pytest.raises(ValueError):
        invariance_scores(params, [np.eye(6)[[0, 1]]], n_pairs=5)
