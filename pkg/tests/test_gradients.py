import numpy as np
import pytest

from conftest import random_baseline, random_gae, random_pitch_batch, random_rgae
from rgae.gae import GaePretrainConfig, pretrain_loss_and_grads
from rgae.mathcore import grad_check, make_rng


def test_quadratic_is_exact():
    params = {"w": make_rng(0).normal(size=(4, 3))}
    rep = grad_check(lambda p: (float(np.sum(p["w"] ** 2)), {"w": 2 * p["w"]}), params)
    assert rep.max_rel_error < 1e-6
    assert rep.n_checked == 12


def test_wrong_gradient_is_detected():
    params = {"w": np.array([1.0, -2.0])}
    rep = grad_check(lambda p: (float(np.sum(p["w"] ** 2)), {"w": 3 * p["w"]}), params)
    assert not rep.passed


@pytest.mark.parametrize("seed", range(20))
def test_gae_pretrain_loss(seed):
    n, M, F, K = 2, 5, 3, 2
    params = random_gae(n, M, F, K, seed)
    rng = make_rng(seed, 9)
    B = 4
    ctx = np.eye(M)[rng.integers(0, M, (B, n))]
    target = np.eye(M)[rng.integers(0, M, B)]
    mask = (rng.random(ctx.shape) < 0.5) / 0.5
    delta = int(rng.integers(-7, 8))
    cfg = GaePretrainConfig(sparsity_target=0.3, sparsity_weight=0.7, norm_deviation_weight=0.4)
    tensors = params.tensors()

    def loss_fn(_):
        return pretrain_loss_and_grads(params, ctx, target, delta, cfg, mask)

    rep = grad_check(loss_fn, tensors)
    assert rep.max_rel_error < 1e-4, rep


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("finetune", [False, True])
def test_rgae_bptt(seed, finetune):
    model = random_rgae(n=2, M=3, F=2, K=2, H=2, seed=seed)
    X = random_pitch_batch(2, 6, 3, seed)
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    tensors = model.tensors()

    def loss_fn(_):
        return model.loss_and_grads(X, mask, finetune=finetune)

    rep = grad_check(loss_fn, tensors, names=model.trainable(finetune))
    assert rep.max_rel_error < 1e-4, rep


def test_rgae_frozen_mode_leaves_gae_without_gradient():
    model = random_rgae()
    X = random_pitch_batch(1, 5, 3, 0)
    _, grads = model.loss_and_grads(X, np.ones((1, 5)), finetune=False)
    assert not any(k.startswith("gae/") for k in grads)


@pytest.mark.parametrize("seed", range(20))
def test_baseline_bptt(seed):
    model = random_baseline(M=3, H=3, window=2, seed=seed)
    X = random_pitch_batch(2, 6, 3, seed)
    mask = np.ones((2, 6))
    rep = grad_check(lambda _: model.loss_and_grads(X, mask), model.tensors())
    assert rep.max_rel_error < 1e-4, rep
