"""Numerical building blocks shared by the model modules.

Everything here works on plain numpy arrays.  Parameters of a model are
kept as an ordered ``dict`` of name -> array so that the optimizer, the
gradient checker and the serializer can treat every model the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

LOG_FLOOR = 1e-12
LN2 = float(np.log(2.0))


def softplus(x):
    """Elementwise ``ln(1 + e^x)``, stable for large ``|x|``."""
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x)
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def tanh(x):
    return np.tanh(x)


def softmax(x, axis=-1):
    x = np.asarray(x)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log2_clamped(p):
    return np.log2(np.maximum(p, LOG_FLOOR))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional stream path.

    ``make_rng(seed, epoch)`` gives every epoch its own reproducible stream,
    which is what makes resumed training match an uninterrupted run.
    """
    return np.random.Generator(np.random.PCG64([int(seed), *map(int, stream)]))


def glorot_uniform(rng: np.random.Generator, shape, dtype=np.float64, gain=1.0) -> np.ndarray:
    fan_out, fan_in = shape
    s = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


@dataclass(frozen=True)
class LrSchedule:
    """Linear decay from ``initial_rate`` at epoch 0 to exactly 0 at ``total_epochs``."""

    initial_rate: float
    total_epochs: int

    def __post_init__(self):
        if self.initial_rate <= 0:
            raise ValueError("initial_rate must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    def rate(self, epoch: int) -> float:
        if epoch >= self.total_epochs:
            return 0.0
        return self.initial_rate * (1.0 - epoch / self.total_epochs)


@dataclass
class RmsPropState:
    decay: float = 0.9
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], decay=0.9, epsilon=1e-8):
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(decay=decay, epsilon=epsilon, accumulators=acc)


def rmsprop_step(params: dict, grads: Mapping, state: RmsPropState, rate: float):
    """Apply one RMSProp update in place and return ``(params, state)``.

    Only names present in ``grads`` are touched, which is how frozen
    parameters are expressed.
    """
    d, eps = state.decay, state.epsilon
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p)
        elif acc.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")
        acc *= d
        acc += (1.0 - d) * g * g
        p -= (rate * g / (np.sqrt(acc) + eps)).astype(p.dtype, copy=False)
    return params, state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[dict], tuple[float, Mapping[str, np.ndarray]]],
    params: dict,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    names=None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params)`` must return ``(loss, grads)``.  Entries of ``params``
    are perturbed in place and restored.  Parameters missing from the analytic
    gradient dict are treated as having zero analytic gradient (frozen).
    """
    _, analytic = loss_fn(params)
    worst = (0.0, "", ())
    count = 0
    for name in names or list(params):
        p = params[name]
        g_a = analytic.get(name)
        if g_a is None:
            g_a = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp, _ = loss_fn(params)
            p[idx] = orig - step
            lm, _ = loss_fn(params)
            p[idx] = orig
            g_n = (lp - lm) / (2 * step)
            ga = float(g_a[idx])
            rel = abs(ga - g_n) / max(abs(ga), abs(g_n), 1e-8)
            count += 1
            if rel > worst[0]:
                worst = (rel, name, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], count, tolerance)
