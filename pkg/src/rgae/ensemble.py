"""Entropy-weighted geometric-mean combination of predictive distributions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathcore import LOG_FLOOR


@dataclass(frozen=True)
class WeightedCombineConfig:
    bias: float = 0.5
    entropy_floor: float = 1e-6

    def __post_init__(self):
        if self.bias < 0:
            raise ValueError("bias must be non-negative")
        if self.entropy_floor <= 0:
            raise ValueError("entropy_floor must be positive")


def _check_normalized(p, tol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("distribution must be non-negative and sum to 1")
    return p


def shannon_entropy(p):
    """Entropy in bits along the last axis, with ``0 log 0 = 0``."""
    p = _check_normalized(p)
    terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def relative_entropy(p, entropy_floor=1e-6):
    """Entropy divided by the entropy of the uniform distribution, floored."""
    p = np.asarray(p)
    A = p.shape[-1]
    if A < 2:
        raise ValueError("relative entropy needs an alphabet of at least 2 symbols")
    return np.maximum(shannon_entropy(p) / np.log2(A), entropy_floor)


def combine(dists, config: WeightedCombineConfig = WeightedCombineConfig()):
    """Combine per-model distributions into one.

    ``dists`` is a sequence of arrays of identical shape ``(..., A)``; any
    leading axes (e.g. time steps) are combined independently.  Each model's
    weight is ``relative_entropy ** -bias`` and the exponents are divided by
    the weight total, so the result is a true weighted geometric mean (equal
    inputs give back the same distribution).  The product is formed in log
    space with probabilities clamped at 1e-12.
    """
    if len(dists) == 0:
        raise ValueError("need at least one distribution")
    arrs = [_check_normalized(d) for d in dists]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("all distributions must share the same alphabet")
    logp = np.zeros(shape)
    total = np.zeros(shape[:-1])
    for a in arrs:
        w = relative_entropy(a, config.entropy_floor) ** (-config.bias)
        logp += np.asarray(w)[..., None] * np.log(np.maximum(a, LOG_FLOOR))
        total = total + w
    logp /= np.asarray(total)[..., None]
    logp -= logp.max(axis=-1, keepdims=True)
    out = np.exp(logp)
    return out / out.sum(axis=-1, keepdims=True)
