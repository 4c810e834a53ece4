"""Evaluation metrics and report files.

Report file schema (UTF-8, ``key=value`` lines in this order, then a
per-sequence table)::

    # rgae evaluation report v1
    model_kind=rgae
    config_digest=<hex>
    param_count=<int>
    n_sequences=<int>
    mean_ce_bits=<6 decimals>
    precision_mean=<6 decimals>        (continuation reports only)
    pct_above_99=<6 decimals>          (continuation reports only)
    <extra metric>=<6 decimals>        (optional, sorted by name)
    [sequences]
    index ce_bits precision             (precision column only when present)
    0 0.123456 1.000000
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FrameSequence, atomic_write
from .mathcore import LOG_FLOOR
from .recurrent import RgaeModel, continue_batch


def _check_alphabet(model, corpus):
    for s in corpus:
        if s.M != model.M:
            raise ValueError(f"corpus alphabet {s.M} does not match the model alphabet {model.M}")


def _length_groups(corpus, max_batch=32):
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(corpus):
        by_len.setdefault(len(s), []).append(i)
    for L in sorted(by_len):
        idx = by_len[L]
        for k in range(0, len(idx), max_batch):
            yield L, idx[k:k + max_batch]


def predict_distributions(model, corpus: Sequence[FrameSequence]) -> list[np.ndarray]:
    """Teacher-forced next-frame distributions, one ``(T-1, M)`` array per sequence."""
    _check_alphabet(model, corpus)
    out: list = [None] * len(corpus)
    for L, idx in _length_groups(corpus):
        if L < 2:
            for i in idx:
                out[i] = np.zeros((0, model.M))
            continue
        X = np.stack([corpus[i].dense(model.dtype) for i in idx])
        probs = model.predict(X)
        for j, i in enumerate(idx):
            out[i] = probs[j]
    return out


def sequence_ce(dists, seq: FrameSequence):
    """Per-event cross-entropies (bits) of predictions against frames 1..T-1."""
    Y = seq.dense(np.float64)[1:]
    p = np.sum(np.asarray(dists, dtype=np.float64) * Y, axis=-1)
    return -np.log2(np.maximum(p, LOG_FLOOR))


def ce_from_distributions(dists_per_seq, corpus):
    """Mean CE over all events and the per-sequence means."""
    per_seq, total, count = [], 0.0, 0
    for d, s in zip(dists_per_seq, corpus):
        ce = sequence_ce(d, s)
        per_seq.append(float(ce.mean()) if len(ce) else 0.0)
        total += float(ce.sum())
        count += len(ce)
    if count == 0:
        raise ValueError("corpus has no prediction events")
    return total / count, per_seq


def evaluate_ce(model, corpus):
    """Mean cross-entropy in bits over all teacher-forced prediction events."""
    return ce_from_distributions(predict_distributions(model, corpus), corpus)[0]


def evaluate_continuation(model, corpus, primer_len: int = 64, threshold: float = 0.99):
    """Free-running continuation after ``primer_len`` frames.

    Returns ``(precision_mean, pct_above_threshold, per_sequence_precision)``;
    a sequence counts as continued correctly when its precision is strictly
    above ``threshold``.
    """
    _check_alphabet(model, corpus)
    if not corpus:
        raise ValueError("empty corpus")
    need = model.gae.n if isinstance(model, RgaeModel) else 1
    if primer_len < need:
        raise ValueError(f"primer length {primer_len} is shorter than the model context {need}")
    for s in corpus:
        if len(s) <= primer_len:
            raise ValueError(f"sequence of length {len(s)} is not longer than the primer ({primer_len})")
        if not s.monophonic:
            raise ValueError("continuation needs monophonic sequences")
    prec = np.zeros(len(corpus))
    for L, idx in _length_groups(corpus):
        X = np.stack([corpus[i].dense(model.dtype) for i in idx])
        gen = continue_batch(model, X[:, :primer_len], L - primer_len, min_primer=need)
        truth = np.stack([corpus[i].pitches()[primer_len:] for i in idx])
        prec[idx] = np.mean(gen == truth, axis=1)
    return float(prec.mean()), float(100.0 * np.mean(prec > threshold)), prec.tolist()


def count_parameters(model) -> int:
    if model is None:
        return 0
    return int(sum(np.size(v) for v in model.tensors().values()))


def config_digest(config: dict) -> str:
    text = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    mean_ce_bits: float
    per_sequence_ce: list
    param_count: int
    config_digest: str
    model_kind: str = "rgae"
    precision_mean: float | None = None
    pct_above_99: float | None = None
    per_sequence_precision: list | None = field(default=None)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.precision_mean is None) != (self.per_sequence_precision is None):
            raise ValueError("precision fields must be given together")
        if self.per_sequence_precision is not None and self.pct_above_99 is None:
            prec = np.asarray(self.per_sequence_precision)
            self.pct_above_99 = float(100.0 * np.mean(prec > 0.99))

    def rounded(self) -> "EvalReport":
        r6 = lambda x: round(float(x), 6)
        return replace(
            self,
            mean_ce_bits=r6(self.mean_ce_bits),
            per_sequence_ce=[r6(x) for x in self.per_sequence_ce],
            precision_mean=None if self.precision_mean is None else r6(self.precision_mean),
            pct_above_99=None if self.pct_above_99 is None else r6(self.pct_above_99),
            per_sequence_precision=None if self.per_sequence_precision is None
            else [r6(x) for x in self.per_sequence_precision],
            extras={k: r6(v) for k, v in self.extras.items()},
        )

    def metrics(self) -> dict[str, float]:
        """Scalar metrics by report key (what ``--assert`` can refer to)."""
        out = {"mean_ce_bits": self.mean_ce_bits, "param_count": float(self.param_count),
               "n_sequences": float(len(self.per_sequence_ce))}
        if self.precision_mean is not None:
            out["precision_mean"] = self.precision_mean
            out["pct_above_99"] = self.pct_above_99
        out.update(self.extras)
        return out


REPORT_KEYS = ("model_kind", "config_digest", "param_count", "n_sequences", "mean_ce_bits",
               "precision_mean", "pct_above_99")


def format_report(report: EvalReport) -> str:
    has_prec = report.per_sequence_precision is not None
    lines = [
        "# rgae evaluation report v1",
        f"model_kind={report.model_kind}",
        f"config_digest={report.config_digest}",
        f"param_count={report.param_count}",
        f"n_sequences={len(report.per_sequence_ce)}",
        f"mean_ce_bits={report.mean_ce_bits:.6f}",
    ]
    if has_prec:
        lines += [f"precision_mean={report.precision_mean:.6f}", f"pct_above_99={report.pct_above_99:.6f}"]
    for k in sorted(report.extras):
        if k in REPORT_KEYS or not k.isidentifier():
            raise ValueError(f"invalid extra metric name {k!r}")
        lines.append(f"{k}={report.extras[k]:.6f}")
    lines.append("[sequences]")
    lines.append("index ce_bits precision" if has_prec else "index ce_bits")
    for i, ce in enumerate(report.per_sequence_ce):
        row = f"{i} {ce:.6f}"
        if has_prec:
            row += f" {report.per_sequence_precision[i]:.6f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path) -> None:
    atomic_write(path, format_report(report))


def parse_report(text: str) -> EvalReport:
    kv: dict[str, str] = {}
    rows: list[list[str]] = []
    in_table = False
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line == "[sequences]":
            in_table = True
            continue
        if in_table:
            if line.startswith("index"):
                continue
            rows.append(line.split())
        else:
            k, _, v = line.partition("=")
            kv[k] = v
    has_prec = "precision_mean" in kv
    return EvalReport(
        mean_ce_bits=float(kv["mean_ce_bits"]),
        per_sequence_ce=[float(r[1]) for r in rows],
        param_count=int(kv["param_count"]),
        config_digest=kv["config_digest"],
        model_kind=kv["model_kind"],
        precision_mean=float(kv["precision_mean"]) if has_prec else None,
        pct_above_99=float(kv["pct_above_99"]) if has_prec else None,
        per_sequence_precision=[float(r[2]) for r in rows] if has_prec else None,
        extras={k: float(v) for k, v in kv.items() if k not in REPORT_KEYS},
    )


def read_report(path) -> EvalReport:
    return parse_report(Path(path).read_text(encoding="utf-8"))


class ReplayModel:
    """Reference predictor that always predicts the truth.

    In free-running mode it looks up the corpus sequence whose prefix matches
    what it has been fed so far.
    """

    kind = "replay"
    dtype = np.float64

    def __init__(self, corpus: Sequence[FrameSequence]):
        self.corpus = list(corpus)
        self.M = self.corpus[0].M
        self._pitch = [s.pitches() for s in self.corpus]

    def tensors(self):
        return {}

    def _next(self, history):
        h = np.asarray(history)
        for p in self._pitch:
            if len(p) > len(h) and np.array_equal(p[: len(h)], h):
                return int(p[len(h)])
        return 0

    def predict(self, X):
        # teacher forcing hands over the whole sequence, so the truth is known
        return np.asarray(X[:, 1:], dtype=np.float64)

    def stepper(self, batch_size):
        return _ReplayStepper(self, batch_size)


class _ReplayStepper:
    def __init__(self, model: ReplayModel, B):
        self.model = model
        self.hist: list[list[int]] = [[] for _ in range(B)]

    def feed(self, x):
        out = np.zeros((len(x), self.model.M))
        for b, row in enumerate(np.argmax(x, axis=-1)):
            self.hist[b].append(int(row))
            out[b, self.model._next(self.hist[b])] = 1.0
        return out


class ConstantModel:
    """Predicts the same pitch at every step."""

    kind = "constant"
    dtype = np.float64

    def __init__(self, M: int, pitch: int, confidence: float = 1.0):
        self.M = M
        self.dist = np.full(M, (1.0 - confidence) / max(M - 1, 1))
        self.dist[pitch] = confidence

    def tensors(self):
        return {}

    def predict(self, X):
        return np.broadcast_to(self.dist, X.shape[:1] + (X.shape[1] - 1, self.M)).copy()

    def stepper(self, batch_size):
        model = self

        class _S:
            def feed(self, x):
                return np.broadcast_to(model.dist, (len(x), model.M)).copy()

        return _S()
