"""Gated autoencoder over a context window and a target frame.

Shapes used throughout:

* context window ``(..., n, M)`` of multi-hot frames (flattened to ``n*M``
  internally, frame-major),
* target frame ``(..., M)``,
* factors ``(..., F)`` and mappings ``(..., K)``.

``Q`` is ``F x n*M``, ``V`` is ``F x M`` and ``W_m`` is ``K x F``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .mathcore import (
    LN2,
    LOG_FLOOR,
    LrSchedule,
    RmsPropState,
    glorot_uniform,
    make_rng,
    rmsprop_step,
    sigmoid,
    softmax,
    softplus,
)

log = logging.getLogger(__name__)


@dataclass
class GaeParams:
    Q: np.ndarray
    V: np.ndarray
    W_m: np.ndarray
    n: int

    def __post_init__(self):
        F = self.V.shape[0]
        if self.Q.shape != (F, self.n * self.M):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(F, self.n * self.M)}")
        if self.W_m.shape[1] != F:
            raise ValueError(f"W_m has shape {self.W_m.shape}, expected (K, {F})")

    @property
    def M(self) -> int:
        return self.V.shape[1]

    @property
    def F(self) -> int:
        return self.V.shape[0]

    @property
    def K(self) -> int:
        return self.W_m.shape[0]

    @classmethod
    def init(cls, n, M, F, K, seed=0, dtype=np.float32, gain=1.0) -> "GaeParams":
        """Glorot-uniform weights scaled by ``gain``.

        Factor products are products of two small projections, so the
        multiplicative path starts close to a flat saddle unless ``gain`` > 1.
        """
        rng = make_rng(seed, 0x6AE)
        return cls(
            Q=glorot_uniform(rng, (F, n * M), dtype, gain),
            V=glorot_uniform(rng, (F, M), dtype, gain),
            W_m=glorot_uniform(rng, (K, F), dtype, gain),
            n=n,
        )

    @classmethod
    def zeros(cls, n, M, F, K, dtype=np.float64) -> "GaeParams":
        return cls(np.zeros((F, n * M), dtype), np.zeros((F, M), dtype), np.zeros((K, F), dtype), n)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"Q": self.Q, "V": self.V, "W_m": self.W_m}

    def copy(self) -> "GaeParams":
        return GaeParams(self.Q.copy(), self.V.copy(), self.W_m.copy(), self.n)

    def astype(self, dtype) -> "GaeParams":
        return GaeParams(self.Q.astype(dtype), self.V.astype(dtype), self.W_m.astype(dtype), self.n)


@dataclass
class GaePretrainConfig:
    epochs: int = 50
    delta_range: tuple[int, int] = (-30, 30)
    dropout_rate: float = 0.0
    sparsity_target: float = 0.05
    sparsity_weight: float = 0.1
    norm_deviation_weight: float = 0.1
    norm_cap: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    augment_transpose: bool = False
    augment_range: tuple[int, int] = (-30, 30)
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.delta_range
        if lo != -hi:
            raise ValueError("delta_range must be symmetric around 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def lr(self) -> LrSchedule:
        return LrSchedule(self.learning_rate, self.epochs)


def _check_window(ctx, params: GaeParams):
    if ctx.shape[-2:] != (params.n, params.M):
        raise ValueError(f"context window has shape {ctx.shape[-2:]}, expected {(params.n, params.M)}")


def _check_frame(x, params: GaeParams):
    if x.shape[-1] != params.M:
        raise ValueError(f"frame width {x.shape[-1]} != alphabet size {params.M}")


def flatten_window(ctx):
    ctx = np.asarray(ctx)
    return ctx.reshape(ctx.shape[:-2] + (ctx.shape[-2] * ctx.shape[-1],))


def infer_mapping(ctx, target, params: GaeParams):
    """Mapping code relating a context window to the frame that follows it.

    Accepts a single pair (``(n, M)`` and ``(M,)``) or batches with matching
    leading dimensions.
    """
    ctx = np.asarray(ctx, dtype=params.Q.dtype)
    target = np.asarray(target, dtype=params.V.dtype)
    _check_window(ctx, params)
    _check_frame(target, params)
    factors = (flatten_window(ctx) @ params.Q.T) * (target @ params.V.T)
    return softplus(factors @ params.W_m.T)


def reconstruct(ctx, mapping, params: GaeParams, output: str = "sigmoid"):
    """Distribution over the next frame given the context and a mapping."""
    ctx = np.asarray(ctx, dtype=params.Q.dtype)
    mapping = np.asarray(mapping, dtype=params.W_m.dtype)
    _check_window(ctx, params)
    if mapping.shape[-1] != params.K:
        raise ValueError(f"mapping size {mapping.shape[-1]} != K={params.K}")
    logits = ((mapping @ params.W_m) * (flatten_window(ctx) @ params.Q.T)) @ params.V
    if output == "sigmoid":
        return sigmoid(logits)
    if output == "softmax":
        return softmax(logits)
    raise ValueError(f"unknown output non-linearity {output!r}")


def shift(x, delta: int):
    """Circularly transpose frames: ``out[i] = x[(i + delta) mod M]``.

    Works on any array whose last axis is the pitch axis, so windows are
    shifted frame by frame.
    """
    return np.roll(np.asarray(x), -int(delta), axis=-1)


def shift_pitch(p, delta: int, M: int):
    """Index-space counterpart of :func:`shift` (the on-bit moves to ``p - delta``)."""
    return (np.asarray(p) - int(delta)) % M


def binary_cross_entropy(target, recon):
    """Mean binary cross-entropy in bits over frame components (and the batch)."""
    target = np.asarray(target, dtype=np.float64)
    r = np.clip(np.asarray(recon, dtype=np.float64), LOG_FLOOR, 1.0 - LOG_FLOOR)
    return float(-np.mean(target * np.log2(r) + (1.0 - target) * np.log2(1.0 - r)))


def column_norms(A):
    return np.sqrt(np.einsum("ij,ij->j", A, A))


def regularization_terms(params: GaeParams, mappings, config: GaePretrainConfig, norms=None):
    """Return ``(sparsity_penalty, norm_deviation_penalty)``."""
    mean_act = np.mean(np.asarray(mappings, dtype=np.float64).reshape(-1, params.K), axis=0)
    sparsity = config.sparsity_weight * float(np.sum((mean_act - config.sparsity_target) ** 2))
    if norms is None:
        norms = (column_norms(params.Q), column_norms(params.V))
    dev = 0.0
    for nrm in norms:
        nrm = nrm.astype(np.float64)
        dev += float(np.sum((nrm - nrm.mean()) ** 2))
    return sparsity, config.norm_deviation_weight * dev


def _norm_deviation_grad(A, weight, norms=None):
    if norms is None:
        norms = column_norms(A)
    coef = 2.0 * weight * (norms - norms.mean()) / np.maximum(norms, 1e-12)
    return (A * coef).astype(A.dtype, copy=False)


def cap_column_norms(params: GaeParams, cap: float) -> None:
    """Rescale in place every column of Q and V whose norm exceeds ``cap``."""
    for A in (params.Q, params.V):
        norms = column_norms(A)
        over = norms > cap
        if np.any(over):
            A[:, over] *= (cap / norms[over]).astype(A.dtype)


def pretrain_loss_and_grads(params: GaeParams, ctx, target, delta, config: GaePretrainConfig, ctx_mask=None):
    """Loss and gradients of the transposition-guided reconstruction objective.

    ``ctx`` is ``(B, n, M)``, ``target`` ``(B, M)``.  ``ctx_mask`` is an
    optional multiplicative (already rescaled) dropout mask for ``ctx``.
    The mapping is inferred from the unshifted pair, the reconstruction is
    made from ``shift(ctx, delta)`` and scored against ``shift(target, delta)``.
    """
    Q, V, W_m = params.Q, params.V, params.W_m
    dt = Q.dtype
    ctx = np.asarray(ctx, dtype=dt)
    if ctx_mask is not None:
        ctx = ctx * ctx_mask
    target = np.asarray(target, dtype=dt)
    B = ctx.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    xc = flatten_window(ctx)
    xs = flatten_window(shift(ctx, delta))
    ys = shift(target, delta)

    a = xc @ Q.T
    b = target @ V.T
    f = a * b
    pre = f @ W_m.T
    m = softplus(pre)
    a_s = xs @ Q.T
    g = m @ W_m
    u = g * a_s
    recon = sigmoid(u @ V)

    M = params.M
    bce = binary_cross_entropy(ys, recon)
    norms = (column_norms(Q), column_norms(V))
    sparsity, norm_dev = regularization_terms(params, m, config, norms)
    loss = bce + sparsity + norm_dev

    d_logits = (recon - ys) / (B * M * LN2)
    dV = u.T @ d_logits
    du = d_logits @ V.T
    dg = du * a_s
    da_s = du * g
    dW_m = m.T @ dg
    dm = dg @ W_m.T
    mean_act = m.mean(axis=0)
    dm = dm + (2.0 * config.sparsity_weight / B) * (mean_act - config.sparsity_target)
    dpre = dm * sigmoid(pre)
    dW_m += dpre.T @ f
    df = dpre @ W_m
    da = df * b
    db = df * a
    dQ = da_s.T @ xs + da.T @ xc
    dV += db.T @ target
    if config.norm_deviation_weight:
        dQ += _norm_deviation_grad(Q, config.norm_deviation_weight, norms[0])
        dV += _norm_deviation_grad(V, config.norm_deviation_weight, norms[1])
    grads = {"Q": dQ.astype(dt, copy=False), "V": dV.astype(dt, copy=False), "W_m": dW_m.astype(dt, copy=False)}
    return loss, grads


def context_pairs(sequences, n):
    """All ``(sequence, position)`` pairs with a full context (``t >= n``)."""
    out = [(s, t) for s, seq in enumerate(sequences) for t in range(n, len(seq))]
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def gather_pairs(padded, pairs, n):
    """Gather ``(ctx, target)`` batches from a stacked ``(S, T, M)`` frame array."""
    s = pairs[:, 0][:, None]
    t = pairs[:, 1][:, None] + np.arange(-n, 0)[None, :]
    return padded[s, t], padded[pairs[:, 0], pairs[:, 1]]


def stack_dense(sequences, M, dtype=np.float32):
    """Stack sequences of frames into a zero-padded ``(S, T_max, M)`` array.

    Each sequence may be an ``(T, M)`` array or anything with a ``dense``
    method (see :class:`rgae.data.FrameSequence`).
    """
    dense = [s.dense(dtype) if hasattr(s, "dense") else np.asarray(s, dtype) for s in sequences]
    T = max((len(d) for d in dense), default=0)
    out = np.zeros((len(dense), T, M), dtype=dtype)
    for i, d in enumerate(dense):
        out[i, : len(d)] = d
    return out


@dataclass
class PretrainState:
    params: GaeParams
    opt: RmsPropState
    epoch: int = 0
    trace: list = field(default_factory=list)


def pretrain_step(batch, params: GaeParams, config: GaePretrainConfig, opt_state: RmsPropState, rng, rate):
    """One optimization step on a batch of ``(ctx, target)`` arrays.

    Returns ``(params, loss)``; ``params`` and ``opt_state`` are updated in place.
    """
    ctx, target = batch
    if len(ctx) == 0:
        raise ValueError("empty batch")
    lo, hi = config.delta_range
    delta = int(rng.integers(lo, hi + 1))
    if config.augment_transpose:
        lo_a, hi_a = config.augment_range
        aug = int(rng.integers(lo_a, hi_a + 1))
        ctx, target = shift(ctx, aug), shift(target, aug)
    mask = None
    if config.dropout_rate > 0:
        keep = 1.0 - config.dropout_rate
        mask = (rng.random(ctx.shape) < keep).astype(params.Q.dtype) / keep
    loss, grads = pretrain_loss_and_grads(params, ctx, target, delta, config, mask)
    rmsprop_step(params.tensors(), grads, opt_state, rate)
    cap_column_norms(params, config.norm_cap)
    return params, loss


def pretrain(sequences, params: GaeParams, config: GaePretrainConfig, state: PretrainState | None = None,
             stop_after: int | None = None, on_epoch=None) -> PretrainState:
    """Pre-train the GAE on every full-context position of ``sequences``.

    Training resumes from ``state`` when given.  ``stop_after`` ends the run
    after that many epochs in total (the learning-rate schedule still spans
    ``config.epochs``).
    """
    if not sequences:
        raise ValueError("empty corpus")
    n = params.n
    padded = stack_dense(sequences, params.M, params.Q.dtype)
    pairs = context_pairs(sequences, n)
    if len(pairs) == 0:
        raise ValueError(f"no sequence is longer than the context length {n}")
    if state is None:
        opt = RmsPropState.for_params(params.tensors(), config.rmsprop_decay, config.rmsprop_epsilon)
        state = PretrainState(params, opt)
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)
    sched = config.lr
    while state.epoch < end:
        e = state.epoch
        rng = make_rng(config.seed, 0x6AE, e)
        order = rng.permutation(len(pairs))
        rate = sched.rate(e)
        t0 = time.time()
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch = gather_pairs(padded, pairs[order[i:i + config.batch_size]], n)
            _, loss = pretrain_step(batch, state.params, config, state.opt, rng, rate)
            losses.append(loss)
        mean = float(np.mean(losses))
        state.trace.append(mean)
        state.epoch += 1
        log.info("gae epoch %d loss %.6f lr %.6g time %.1fs", e + 1, mean, rate, time.time() - t0)
        if on_epoch is not None:
            on_epoch(state)
    return state


def _cosine(a, b):
    return np.sum(a * b, -1) / np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), 1e-30)


def invariance_scores(params: GaeParams, sequences, n_pairs=1000, delta_range=(-12, 12), seed=0):
    """How transposition-invariant the mappings are on ``sequences``.

    Draws ``n_pairs`` (context, target) pairs and returns two mean cosine
    similarities: mapping of a pair vs. mapping of the same pair shifted by a
    random ``delta`` in ``delta_range``, and mapping of a pair vs. mapping of
    an unrelated pair.  An invariant GAE has the first well above the second.
    """
    rng = make_rng(seed, 0x1417)
    n = params.n
    pairs = context_pairs(sequences, n)
    if len(pairs) < 2:
        raise ValueError("need at least two (context, target) pairs")
    pick = rng.choice(len(pairs), n_pairs, replace=n_pairs > len(pairs))
    ctx, tgt = gather_pairs(stack_dense(sequences, params.M, params.Q.dtype), pairs[pick], n)
    m = infer_mapping(ctx, tgt, params)
    deltas = rng.integers(delta_range[0], delta_range[1] + 1, n_pairs)
    shifted = np.stack([infer_mapping(shift(ctx[i], d), shift(tgt[i], d), params) for i, d in enumerate(deltas)])
    # pair i against pair i+1 of a random order: never the pair itself
    order = rng.permutation(n_pairs)
    other = np.empty_like(order)
    other[order] = np.roll(order, 1)
    return float(np.mean(_cosine(m, shifted))), float(np.mean(_cosine(m, m[other])))
