"""GRU cell, the recurrent gated autoencoder (RGAE) and the baseline GRU RNN.

Sequences enter the models as dense ``(B, T, M)`` one-hot arrays plus a
``(B, T)`` validity mask (sequences in a batch are right-padded).  Step
``t`` consumes frame ``x_t`` and emits a distribution for ``x_{t+1}``, so a
length-``T`` sequence yields ``T - 1`` prediction events.  Contexts reaching
before the sequence start see zero frames.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .gae import GaeParams, shift
from .mathcore import (
    LN2,
    LOG_FLOOR,
    RmsPropState,
    LrSchedule,
    clip_by_global_norm,
    glorot_uniform,
    make_rng,
    rmsprop_step,
    sigmoid,
    softmax,
    softplus,
)

log = logging.getLogger(__name__)

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h", "U_o")


@dataclass
class GruParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    U_o: np.ndarray

    def __post_init__(self):
        H, D = self.W_z.shape
        for name in ("W_r", "W_h"):
            if getattr(self, name).shape != (H, D):
                raise ValueError(f"{name} must have shape {(H, D)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (H, H):
                raise ValueError(f"{name} must have shape {(H, H)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (H,):
                raise ValueError(f"{name} must have shape {(H,)}")
        if self.U_o.shape[1] != H:
            raise ValueError(f"U_o must have {H} columns")

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    @property
    def output_size(self) -> int:
        return self.U_o.shape[0]

    @classmethod
    def init(cls, input_size, hidden, output_size, seed=0, dtype=np.float32) -> "GruParams":
        rng = make_rng(seed, 0x64E)
        H, D = hidden, input_size
        return cls(
            W_z=glorot_uniform(rng, (H, D), dtype),
            W_r=glorot_uniform(rng, (H, D), dtype),
            W_h=glorot_uniform(rng, (H, D), dtype),
            U_z=glorot_uniform(rng, (H, H), dtype),
            U_r=glorot_uniform(rng, (H, H), dtype),
            U_h=glorot_uniform(rng, (H, H), dtype),
            b_z=np.zeros(H, dtype),
            b_r=np.zeros(H, dtype),
            b_h=np.zeros(H, dtype),
            U_o=glorot_uniform(rng, (output_size, H), dtype),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GRU_NAMES}

    def copy(self) -> "GruParams":
        return GruParams(**{k: v.copy() for k, v in self.tensors().items()})

    def astype(self, dtype) -> "GruParams":
        return GruParams(**{k: v.astype(dtype) for k, v in self.tensors().items()})


def gru_step(x, h_prev, p: GruParams):
    """One GRU update; ``x`` and ``h_prev`` may carry leading batch axes."""
    x = np.asarray(x)
    h_prev = np.asarray(h_prev)
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden:
        raise ValueError(
            f"gru_step got input {x.shape[-1]} / state {h_prev.shape[-1]}, "
            f"expected {p.input_size} / {p.hidden}"
        )
    z = sigmoid(x @ p.W_z.T + h_prev @ p.U_z.T + p.b_z)
    r = sigmoid(x @ p.W_r.T + h_prev @ p.U_r.T + p.b_r)
    c = np.tanh(x @ p.W_h.T + (r * h_prev) @ p.U_h.T + p.b_h)
    return z * h_prev + (1.0 - z) * c


def gru_forward(X, p: GruParams):
    """Run the GRU over ``X`` of shape ``(B, T, D)`` from a zero state.

    Returns hidden states ``(B, T, H)`` and a cache for :func:`gru_backward`.
    """
    B, T, _ = X.shape
    H = p.hidden
    W = np.concatenate([p.W_z, p.W_r, p.W_h])
    xin = X @ W.T + np.concatenate([p.b_z, p.b_r, p.b_h])
    U_zr = np.concatenate([p.U_z, p.U_r])
    dt = xin.dtype
    hs = np.zeros((B, T, H), dt)
    hprev = np.zeros((B, T, H), dt)
    zs = np.empty((B, T, H), dt)
    rs = np.empty((B, T, H), dt)
    cs = np.empty((B, T, H), dt)
    h = np.zeros((B, H), dt)
    for t in range(T):
        hprev[:, t] = h
        zr = sigmoid(xin[:, t, : 2 * H] + h @ U_zr.T)
        z, r = zr[:, :H], zr[:, H:]
        c = np.tanh(xin[:, t, 2 * H:] + (r * h) @ p.U_h.T)
        h = z * h + (1.0 - z) * c
        zs[:, t], rs[:, t], cs[:, t], hs[:, t] = z, r, c, h
    return hs, {"X": X, "hprev": hprev, "z": zs, "r": rs, "c": cs}


def gru_backward(dhs, cache, p: GruParams, need_dx=False):
    """Backpropagate ``dL/dh_t`` (``(B, T, H)``, output contributions only)
    through time.  Returns ``(grads, dX)``; ``grads`` excludes ``U_o``."""
    X, hprev, zs, rs, cs = cache["X"], cache["hprev"], cache["z"], cache["r"], cache["c"]
    B, T, H = dhs.shape
    U_zr = np.concatenate([p.U_z, p.U_r])
    daz = np.empty_like(zs)
    dar = np.empty_like(rs)
    dac = np.empty_like(cs)
    dh = np.zeros((B, H), dhs.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, t]
        z, r, c, hp = zs[:, t], rs[:, t], cs[:, t], hprev[:, t]
        dc = dh * (1.0 - z)
        ac = dc * (1.0 - c * c)
        az = dh * (hp - c) * z * (1.0 - z)
        drh = ac @ p.U_h
        ar = drh * hp * r * (1.0 - r)
        daz[:, t], dar[:, t], dac[:, t] = az, ar, ac
        dh = dh * z + drh * r + np.concatenate([az, ar], axis=1) @ U_zr
    D = X.shape[-1]
    Xf = X.reshape(-1, D)
    hpf = hprev.reshape(-1, H)
    az, ar, ac = daz.reshape(-1, H), dar.reshape(-1, H), dac.reshape(-1, H)
    grads = {
        "W_z": az.T @ Xf,
        "W_r": ar.T @ Xf,
        "W_h": ac.T @ Xf,
        "U_z": az.T @ hpf,
        "U_r": ar.T @ hpf,
        "U_h": ac.T @ (rs.reshape(-1, H) * hpf),
        "b_z": az.sum(axis=0),
        "b_r": ar.sum(axis=0),
        "b_h": ac.sum(axis=0),
    }
    dX = None
    if need_dx:
        dX = daz @ p.W_z + dar @ p.W_r + dac @ p.W_h
    return grads, dX


def windows(X, n):
    """Flattened windows of the ``n`` frames ending at each step.

    ``out[:, i]`` holds frames ``i-n .. i-1`` (zero before the start), so for
    ``X`` of shape ``(B, T, M)`` the result has shape ``(B, T+1, n*M)``.
    """
    B, T, M = X.shape
    padded = np.concatenate([np.zeros((B, n, M), X.dtype), X], axis=1)
    view = np.lib.stride_tricks.sliding_window_view(padded, n, axis=1)  # (B, T+1, M, n)
    return np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(B, T + 1, n * M)


def categorical_cross_entropy(target_index, dist):
    """``-log2 dist[target_index]`` with the probability clamped at 1e-12."""
    return float(-np.log2(max(float(np.asarray(dist)[target_index]), LOG_FLOOR)))


def _event_ce(probs, Y):
    p = np.sum(probs * Y, axis=-1)
    return -np.log2(np.maximum(p, LOG_FLOOR))


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


@dataclass
class RgaeModel:
    gae: GaeParams
    gru: GruParams

    kind = "rgae"

    def __post_init__(self):
        K = self.gae.K
        if self.gru.input_size != K or self.gru.output_size != K:
            raise ValueError(f"GRU input/output size must equal the mapping size K={K}")

    @classmethod
    def init(cls, gae: GaeParams, hidden, seed=0) -> "RgaeModel":
        return cls(gae, GruParams.init(gae.K, hidden, gae.K, seed, gae.Q.dtype))

    @property
    def M(self) -> int:
        return self.gae.M

    @property
    def dtype(self):
        return self.gae.Q.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"gae/{k}": v for k, v in self.gae.tensors().items()}
        out.update({f"gru/{k}": v for k, v in self.gru.tensors().items()})
        return out

    def trainable(self, finetune: bool) -> list[str]:
        names = [f"gru/{k}" for k in GRU_NAMES]
        if finetune:
            names += [f"gae/{k}" for k in ("Q", "V", "W_m")]
        return names

    def copy(self) -> "RgaeModel":
        return RgaeModel(self.gae.copy(), self.gru.copy())

    def astype(self, dtype) -> "RgaeModel":
        return RgaeModel(self.gae.astype(dtype), self.gru.astype(dtype))

    def _forward(self, X, ctx_mask=None):
        g, p = self.gae, self.gru
        B, T, M = X.shape
        Wn = windows(X, g.n)
        if ctx_mask is not None:
            Wn = Wn * ctx_mask
        A = Wn @ g.Q.T
        Bv = X @ g.V.T
        fct = A[:, :T] * Bv
        pm = fct @ g.W_m.T
        m = softplus(pm)
        hs, gcache = gru_forward(m[:, : T - 1], p)
        po = hs @ p.U_o.T
        mt = softplus(po)
        G = mt @ g.W_m
        Z = G * A[:, 1:T]
        probs = softmax(Z @ g.V)
        cache = dict(Wn=Wn, A=A, Bv=Bv, fct=fct, pm=pm, m=m, hs=hs, gru=gcache, po=po, mt=mt, G=G, Z=Z)
        return probs, cache

    def predict(self, X):
        """Next-frame distributions ``(B, T-1, M)`` under teacher forcing."""
        X = np.asarray(X, dtype=self.dtype)
        if X.shape[1] < 2:
            raise ValueError("sequences need at least 2 frames")
        return self._forward(X)[0]

    def hidden_states(self, X):
        X = np.asarray(X, dtype=self.dtype)
        return self._forward(X)[1]["hs"]

    def loss_and_grads(self, X, mask, finetune=False, rng=None, dropout_rate=0.0):
        """Mean per-event cross-entropy (bits) and gradients of the trainable tensors."""
        g, p = self.gae, self.gru
        X = np.asarray(X, dtype=self.dtype)
        B, T, M = X.shape
        ctx_mask = None
        if dropout_rate > 0 and rng is not None:
            ctx_mask = _dropout_mask(rng, (B, T + 1, g.n * M), dropout_rate, X.dtype)
        probs, c = self._forward(X, ctx_mask)
        Y = X[:, 1:]
        w = np.asarray(mask, dtype=X.dtype)[:, 1:]
        n_events = float(w.sum())
        ce = _event_ce(probs, Y)
        loss = float(np.sum(ce * w) / n_events)

        dlogits = (probs - Y) * (w / (n_events * LN2))[..., None]
        A = c["A"]
        A1 = A[:, 1:T]
        dZ = dlogits @ g.V.T
        dG = dZ * A1
        mt = c["mt"]
        K, F = g.K, g.F
        dmt = dG @ g.W_m.T
        dpo = dmt * sigmoid(c["po"])
        hs = c["hs"]
        H = p.hidden
        grads = {}
        grads["gru/U_o"] = dpo.reshape(-1, K).T @ hs.reshape(-1, H)
        dhs = dpo @ p.U_o
        ggrads, dm_in = gru_backward(dhs, c["gru"], p, need_dx=finetune)
        for k, v in ggrads.items():
            grads[f"gru/{k}"] = v
        if finetune:
            dW_m = mt.reshape(-1, K).T @ dG.reshape(-1, F)
            dV = c["Z"].reshape(-1, F).T @ dlogits.reshape(-1, M)
            dA = np.zeros_like(A)
            dA[:, 1:T] = dZ * c["G"]
            dm = np.zeros_like(c["m"])
            dm[:, : T - 1] = dm_in
            dpm = dm * sigmoid(c["pm"])
            dW_m += dpm.reshape(-1, K).T @ c["fct"].reshape(-1, F)
            dfct = dpm @ g.W_m
            dA[:, :T] += dfct * c["Bv"]
            dBv = dfct * A[:, :T]
            dV += dBv.reshape(-1, F).T @ X.reshape(-1, M)
            dQ = dA.reshape(-1, F).T @ c["Wn"].reshape(-1, g.n * M)
            grads["gae/Q"], grads["gae/V"], grads["gae/W_m"] = dQ, dV, dW_m
        return loss, grads

    def stepper(self, batch_size):
        return _RgaeStepper(self, batch_size)


class _RgaeStepper:
    """Incremental RGAE inference, one frame per call."""

    def __init__(self, model: RgaeModel, B):
        g = model.gae
        self.model = model
        self.win = np.zeros((B, g.n, g.M), model.dtype)
        self.a = np.zeros((B, g.F), model.dtype)  # Q-projection of the current window
        self.h = np.zeros((B, model.gru.hidden), model.dtype)

    def feed(self, x):
        g, p = self.model.gae, self.model.gru
        x = np.asarray(x, dtype=self.win.dtype)
        m = softplus((self.a * (x @ g.V.T)) @ g.W_m.T)
        self.h = gru_step(m, self.h, p)
        self.win = np.concatenate([self.win[:, 1:], x[:, None]], axis=1)
        self.a = self.win.reshape(len(x), -1) @ g.Q.T
        mt = softplus(self.h @ p.U_o.T)
        return softmax(((mt @ g.W_m) * self.a) @ g.V)


@dataclass
class BaselineRnn:
    """Absolute-pitch GRU reading the last ``window`` frames at every step."""

    gru: GruParams
    window: int

    kind = "rnn"

    def __post_init__(self):
        if self.gru.input_size % self.window:
            raise ValueError("GRU input size must be a multiple of the window length")
        if self.gru.output_size * self.window != self.gru.input_size:
            raise ValueError("GRU output size must equal the alphabet size")

    @classmethod
    def init(cls, M, hidden, window=1, seed=0, dtype=np.float32) -> "BaselineRnn":
        return cls(GruParams.init(window * M, hidden, M, seed, dtype), window)

    @property
    def M(self) -> int:
        return self.gru.output_size

    @property
    def dtype(self):
        return self.gru.W_z.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"rnn/{k}": v for k, v in self.gru.tensors().items()}

    def trainable(self, finetune: bool) -> list[str]:
        return [f"rnn/{k}" for k in GRU_NAMES]

    def copy(self) -> "BaselineRnn":
        return BaselineRnn(self.gru.copy(), self.window)

    def astype(self, dtype) -> "BaselineRnn":
        return BaselineRnn(self.gru.astype(dtype), self.window)

    def _inputs(self, X, in_mask=None):
        Wn = windows(X, self.window)[:, 1:-1]  # windows ending at x_t for t = 0..T-2
        if in_mask is not None:
            Wn = Wn * in_mask
        return Wn

    def _forward(self, X, in_mask=None):
        Xin = self._inputs(X, in_mask)
        hs, gcache = gru_forward(Xin, self.gru)
        probs = softmax(hs @ self.gru.U_o.T)
        return probs, hs, gcache

    def predict(self, X):
        X = np.asarray(X, dtype=self.dtype)
        if X.shape[1] < 2:
            raise ValueError("sequences need at least 2 frames")
        return self._forward(X)[0]

    def hidden_states(self, X):
        return self._forward(np.asarray(X, dtype=self.dtype))[1]

    def loss_and_grads(self, X, mask, finetune=False, rng=None, dropout_rate=0.0):
        p = self.gru
        X = np.asarray(X, dtype=self.dtype)
        B, T, M = X.shape
        in_mask = None
        if dropout_rate > 0 and rng is not None:
            in_mask = _dropout_mask(rng, (B, T - 1, self.window * M), dropout_rate, X.dtype)
        probs, hs, gcache = self._forward(X, in_mask)
        Y = X[:, 1:]
        w = np.asarray(mask, dtype=X.dtype)[:, 1:]
        n_events = float(w.sum())
        loss = float(np.sum(_event_ce(probs, Y) * w) / n_events)
        dlogits = (probs - Y) * (w / (n_events * LN2))[..., None]
        H = p.hidden
        grads = {"rnn/U_o": dlogits.reshape(-1, M).T @ hs.reshape(-1, H)}
        ggrads, _ = gru_backward(dlogits @ p.U_o, gcache, p)
        for k, v in ggrads.items():
            grads[f"rnn/{k}"] = v
        return loss, grads

    def stepper(self, batch_size):
        return _RnnStepper(self, batch_size)


class _RnnStepper:
    def __init__(self, model: BaselineRnn, B):
        self.model = model
        self.win = np.zeros((B, model.window, model.M), model.dtype)
        self.h = np.zeros((B, model.gru.hidden), model.dtype)

    def feed(self, x):
        x = np.asarray(x, dtype=self.win.dtype)
        self.win = np.concatenate([self.win[:, 1:], x[:, None]], axis=1)
        self.h = gru_step(self.win.reshape(len(x), -1), self.h, self.model.gru)
        return softmax(self.h @ self.model.gru.U_o.T)


def continue_batch(model, primers, steps: int, min_primer: int = 1):
    """Free-running argmax continuation of a batch of one-hot primers.

    ``primers`` is ``(B, P, M)``; returns generated pitch indices ``(B, steps)``.
    Ties resolve to the lowest pitch index.
    """
    primers = np.asarray(primers)
    B, P, M = primers.shape
    if P < min_primer:
        raise ValueError(f"primer of length {P} is shorter than the required {min_primer}")
    out = np.zeros((B, steps), dtype=np.int64)
    if steps == 0:
        return out
    st = model.stepper(B)
    for t in range(P):
        dist = st.feed(primers[:, t])
    eye = np.eye(M, dtype=model.dtype)
    for k in range(steps):
        nxt = np.argmax(dist, axis=-1)
        out[:, k] = nxt
        if k + 1 < steps:
            dist = st.feed(eye[nxt])
    return out


def continue_sequence(model, primer, steps: int):
    """Continue a single ``(P, M)`` primer by ``steps`` argmax frames.

    Returns one-hot frames ``(steps, M)``.  The RGAE needs at least ``n``
    primer frames to fill its context window.
    """
    primer = np.asarray(primer)
    need = model.gae.n if isinstance(model, RgaeModel) else 1
    idx = continue_batch(model, primer[None], steps, min_primer=need)[0]
    return np.eye(primer.shape[-1], dtype=primer.dtype)[idx]


@dataclass
class TrainConfig:
    epochs: int = 50
    finetune_epochs: int = 0
    learning_rate: float = 1e-3
    dropout_rate: float = 0.0
    grad_clip_norm: float = 5.0
    batch_size: int = 8
    augment_transpose: bool = False
    augment_range: tuple[int, int] = (-30, 30)
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.finetune_epochs > self.epochs:
            raise ValueError("finetune_epochs must not exceed epochs")

    @property
    def lr(self) -> LrSchedule:
        return LrSchedule(self.learning_rate, self.epochs)


@dataclass
class TrainState:
    model: object
    opt: RmsPropState
    epoch: int = 0
    trace: list = field(default_factory=list)


def make_batches(lengths, batch_size, rng):
    """Length-bucketed batches: shuffle, stable-sort by length, chunk, shuffle chunks."""
    order = rng.permutation(len(lengths))
    order = order[np.argsort(np.asarray(lengths)[order], kind="stable")]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def pad_batch(dense_seqs, idx, M, dtype):
    T = max(len(dense_seqs[i]) for i in idx)
    X = np.zeros((len(idx), T, M), dtype)
    mask = np.zeros((len(idx), T), dtype)
    for j, i in enumerate(idx):
        L = len(dense_seqs[i])
        X[j, :L] = dense_seqs[i]
        mask[j, :L] = 1
    return X, mask


def train(model, sequences, config: TrainConfig, state: TrainState | None = None,
          stop_after: int | None = None, on_epoch=None) -> TrainState:
    """BPTT training of an :class:`RgaeModel` or :class:`BaselineRnn`.

    For the RGAE the GAE tensors stay frozen until the last
    ``config.finetune_epochs`` epochs.  The model is updated in place.
    """
    if not sequences:
        raise ValueError("empty corpus")
    M = model.M
    dt = model.dtype
    dense = [s.dense(dt) if hasattr(s, "dense") else np.asarray(s, dt) for s in sequences]
    dense = [d for d in dense if len(d) >= 2]
    if not dense:
        raise ValueError("no sequence has at least 2 frames")
    if any(d.shape[1] != M for d in dense):
        raise ValueError(f"corpus alphabet does not match the model (M={M})")
    if state is None:
        opt = RmsPropState.for_params(
            {k: v for k, v in model.tensors().items() if k in model.trainable(True)},
            config.rmsprop_decay, config.rmsprop_epsilon,
        )
        state = TrainState(model, opt)
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)
    sched = config.lr
    lengths = [len(d) for d in dense]
    params = state.model.tensors()
    while state.epoch < end:
        e = state.epoch
        finetune = e >= config.epochs - config.finetune_epochs
        rng = make_rng(config.seed, 0x7A1, e)
        rate = sched.rate(e)
        t0 = time.time()
        total, events = 0.0, 0.0
        for idx in make_batches(lengths, config.batch_size, rng):
            X, mask = pad_batch(dense, idx, M, dt)
            if config.augment_transpose:
                lo, hi = config.augment_range
                X = shift(X, int(rng.integers(lo, hi + 1)))
            loss, grads = state.model.loss_and_grads(X, mask, finetune, rng, config.dropout_rate)
            clip_by_global_norm(grads, config.grad_clip_norm)
            rmsprop_step(params, grads, state.opt, rate)
            n_ev = float(mask[:, 1:].sum())
            total += loss * n_ev
            events += n_ev
        mean = total / events
        state.trace.append(mean)
        state.epoch += 1
        log.info("%s epoch %d loss %.6f lr %.6g%s time %.1fs", state.model.kind, e + 1, mean, rate,
                 " (fine-tune)" if finetune and isinstance(state.model, RgaeModel) else "", time.time() - t0)
        if on_epoch is not None:
            on_epoch(state)
    return state
