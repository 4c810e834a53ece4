"""Frame corpora: file I/O, encodings, copy-and-shift datasets and splits.

Corpus file format (UTF-8 text)::

    #M=64
    #@ scheme=+5 fragment=4
    10
    12
    60 64 67

    14

One line per frame with space-separated pitch indices, blank lines between
sequences, ``#`` lines ignored (``#M=`` sets the alphabet size, ``#@`` lines
carry optional metadata for the sequence that follows).
"""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .gae import shift
from .mathcore import make_rng

DEFAULT_M = 128


class CorpusFormatError(ValueError):
    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[tuple[int, ...], ...]
    M: int
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        for f in self.frames:
            for p in f:
                if not 0 <= p < self.M:
                    raise ValueError(f"pitch {p} outside [0, {self.M})")

    @classmethod
    def from_pitches(cls, pitches: Iterable[int], M: int, **meta) -> "FrameSequence":
        return cls(tuple((int(p),) for p in pitches), M, dict(meta))

    def __len__(self):
        return len(self.frames)

    @property
    def monophonic(self) -> bool:
        return all(len(f) == 1 for f in self.frames)

    def pitches(self) -> np.ndarray:
        if not self.monophonic:
            raise ValueError("sequence is not monophonic")
        return np.array([f[0] for f in self.frames], dtype=np.int64)

    def dense(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros((len(self.frames), self.M), dtype=dtype)
        for t, f in enumerate(self.frames):
            out[t, list(f)] = 1
        return out


def one_hot(pitches, M, dtype=np.float32):
    return np.eye(M, dtype=dtype)[np.asarray(pitches, dtype=np.int64)]


_META_RE = re.compile(r"(\w+)=(\S+)")


def parse_corpus(text: str, M: int | None = None) -> list[FrameSequence]:
    header_M = None
    seqs: list[FrameSequence] = []
    raw: list[tuple[list[int], int]] = []
    meta: dict = {}
    pending_meta: dict = {}

    def flush():
        nonlocal raw, meta
        if raw:
            seqs.append((raw, meta))
        raw, meta = [], {}

    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("#"):
            if s.startswith("#M="):
                try:
                    header_M = int(s[3:])
                except ValueError:
                    raise CorpusFormatError(f"bad alphabet header {s!r}", lineno) from None
                if header_M < 1:
                    raise CorpusFormatError("alphabet size must be positive", lineno)
            elif s.startswith("#@"):
                pending_meta.update(_META_RE.findall(s[2:]))
            continue
        if not s:
            flush()
            continue
        if not raw:
            meta, pending_meta = pending_meta, {}
        try:
            frame = [int(tok) for tok in s.split(" ")]
        except ValueError:
            raise CorpusFormatError(f"malformed frame {line!r}", lineno) from None
        raw.append((frame, lineno))
    flush()

    alphabet = header_M if header_M is not None else (M if M is not None else DEFAULT_M)
    out = []
    for frames, meta in seqs:
        for frame, lineno in frames:
            for p in frame:
                if not 0 <= p < alphabet:
                    raise CorpusFormatError(f"pitch {p} outside [0, {alphabet})", lineno)
        out.append(FrameSequence(tuple(tuple(f) for f, _ in frames), alphabet, meta))
    return out


def read_corpus(path, M: int | None = None) -> list[FrameSequence]:
    """Read a frame-corpus file.  ``M`` applies when the file has no ``#M=`` header."""
    return parse_corpus(Path(path).read_text(encoding="utf-8"), M)


def format_corpus(sequences: Sequence[FrameSequence], M: int | None = None) -> str:
    if M is None:
        M = sequences[0].M if sequences else DEFAULT_M
    lines = [f"#M={M}"]
    for i, seq in enumerate(sequences):
        if seq.M != M:
            raise ValueError("all sequences in a corpus must share the alphabet size")
        if i:
            lines.append("")
        if seq.meta:
            lines.append("#@ " + " ".join(f"{k}={v}" for k, v in seq.meta.items()))
        lines.extend(" ".join(map(str, f)) for f in seq.frames)
    return "\n".join(lines) + "\n"


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_corpus(path, sequences: Sequence[FrameSequence], M: int | None = None) -> None:
    atomic_write(path, format_corpus(sequences, M))


@dataclass(frozen=True)
class TranspositionScheme:
    deltas: tuple[int, ...]

    def __post_init__(self):
        if not self.deltas:
            raise ValueError("a transposition scheme needs at least one shift")

    @property
    def name(self) -> str:
        return ",".join(f"{d:+d}" for d in self.deltas)

    def delta(self, i: int) -> int:
        return self.deltas[i % len(self.deltas)]


STANDARD_SCHEMES = tuple(
    TranspositionScheme(d)
    for d in [(5,), (7,), (-5,), (-7,), (12, -12), (3, -3), (4, -4), (9, -9), (4, -8), (-4, 8)]
)


def parse_schemes(text: str) -> list[TranspositionScheme]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            out.append(TranspositionScheme(tuple(int(t) for t in s.split(","))))
        except ValueError:
            raise CorpusFormatError(f"malformed scheme {line!r}", lineno) from None
    return out


def read_schemes(path) -> list[TranspositionScheme]:
    return parse_schemes(Path(path).read_text(encoding="utf-8"))


def apply_scheme(fragment: Sequence[int], scheme: TranspositionScheme, length: int, M: int) -> list[int]:
    """Repeat ``fragment`` up to ``length`` steps, moving each copy by the next scheme shift."""
    L = len(fragment)
    if L == 0:
        raise ValueError("empty fragment")
    if L > length:
        raise ValueError(f"fragment of length {L} is longer than the sequence ({length})")
    out = []
    block = [int(p) % M for p in fragment]
    j = 0
    while len(out) < length:
        out.extend(block)
        block = [(p + scheme.delta(j)) % M for p in block]
        j += 1
    return out[:length]


def verify_scheme(pitches: Sequence[int], fragment_len: int, scheme: TranspositionScheme, M: int) -> bool:
    """Check that every block is the previous one moved up by the scheme's next shift.

    In terms of :func:`rgae.gae.shift` (which moves on-bits *down*), block
    ``i+1`` equals ``shift(block_i, -delta_i)``.
    """
    x = np.asarray(pitches)
    L = fragment_len
    for j in range(1, (len(x) + L - 1) // L):
        prev = x[(j - 1) * L: j * L]
        cur = x[j * L: (j + 1) * L]
        if np.any(cur != (prev[: len(cur)] + scheme.delta(j - 1)) % M):
            return False
    return True


FragmentSource = Callable[[int, np.random.Generator], tuple]


@dataclass
class RandomWalkFragments:
    """Bounded random walks with integer steps in ``[-max_step, max_step]``.

    Walks start uniformly in ``[low, high)`` and reflect at the bounds.
    """

    low: int
    high: int
    max_step: int = 4

    def __call__(self, length: int, rng: np.random.Generator) -> tuple:
        p = int(rng.integers(self.low, self.high))
        out = [p]
        for _ in range(length - 1):
            p += int(rng.integers(-self.max_step, self.max_step + 1))
            if p < self.low:
                p = 2 * self.low - p
            elif p >= self.high:
                p = 2 * (self.high - 1) - p
            out.append(p)
        return tuple(out)


@dataclass
class CorpusFragments:
    """Random contiguous excerpts of monophonic sequences from a corpus."""

    sequences: Sequence[FrameSequence]

    def __call__(self, length: int, rng: np.random.Generator) -> tuple:
        pool = [s for s in self.sequences if s.monophonic and len(s) >= length]
        if not pool:
            raise ValueError(f"no monophonic sequence of length >= {length} in the fragment corpus")
        seq = pool[int(rng.integers(len(pool)))].pitches()
        start = int(rng.integers(len(seq) - length + 1))
        return tuple(int(p) for p in seq[start:start + length])


@dataclass
class SchemeDatasetSpec:
    schemes: Sequence[TranspositionScheme] = STANDARD_SCHEMES
    fragment_lengths: Sequence[int] = (4, 8, 16)
    n_train: int = 20
    n_test: int = 5
    n_eval: int = 1
    sequence_length: int = 512
    M: int = 64
    seed: int = 0

    @property
    def sequences_per_cell(self) -> int:
        return self.n_train + self.n_test + self.n_eval


def generate_scheme_dataset(spec: SchemeDatasetSpec, fragment_source: FragmentSource | None = None):
    """Build ``(train, test, eval)`` copy-and-shift corpora.

    Every (scheme, fragment length) cell gets its own derived seed and
    ``spec.sequences_per_cell`` distinct fragments, so no fragment is shared
    between splits.
    """
    if fragment_source is None:
        fragment_source = RandomWalkFragments(spec.M // 4, 3 * spec.M // 4)
    splits: tuple[list, list, list] = ([], [], [])
    for li, L in enumerate(spec.fragment_lengths):
        if L > spec.sequence_length:
            raise ValueError(f"fragment length {L} exceeds sequence length {spec.sequence_length}")
        for si, scheme in enumerate(spec.schemes):
            rng = make_rng(spec.seed, li, si)
            seen: set = set()
            frags = []
            tries = 0
            while len(frags) < spec.sequences_per_cell:
                f = tuple(int(p) % spec.M for p in fragment_source(L, rng))
                tries += 1
                if f in seen:
                    if tries > 1000 * spec.sequences_per_cell:
                        raise ValueError("fragment source cannot supply enough distinct fragments")
                    continue
                seen.add(f)
                frags.append(f)
            bounds = np.cumsum([spec.n_train, spec.n_test, spec.n_eval])
            for k, f in enumerate(frags):
                which = int(np.searchsorted(bounds, k, side="right"))
                seq = FrameSequence.from_pitches(
                    apply_scheme(f, scheme, spec.sequence_length, spec.M), spec.M,
                    scheme=scheme.name, fragment=L,
                )
                splits[which].append(seq)
    return splits


def kfold_split(corpus: Sequence, k: int, seed: int = 0):
    """``k`` disjoint test folds covering ``corpus``; sizes differ by at most one."""
    return [([corpus[j] for j in tr], [corpus[j] for j in te]) for tr, te in kfold_indices(len(corpus), k, seed)]


def kfold_indices(n: int, k: int, seed: int = 0):
    """``(train_idx, test_idx)`` index lists for each of ``k`` folds of ``n`` items."""
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} sequences into {k} folds")
    order = make_rng(seed, 0xF01D).permutation(n)
    out = []
    for test_idx in np.array_split(order, k):
        test_set = set(test_idx.tolist())
        out.append(([int(j) for j in order if j not in test_set], [int(j) for j in test_idx]))
    return out


def augment_transpose(batch, delta_range, seed):
    """Shift every frame of ``batch`` (last axis = pitch) by one random delta.

    ``seed`` may be an int or a numpy Generator.  Returns ``(batch, delta)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, 0xA06)
    lo, hi = delta_range
    delta = int(rng.integers(lo, hi + 1))
    return shift(batch, delta), delta


def scale_melodies(n_seqs, length, M, seed=0, scale=(0, 2, 4, 5, 7, 9, 11), tonic=0, max_step=2):
    """Random-walk melodies over the degrees of a fixed scale.

    The walk moves in scale-degree space (steps in ``[-max_step, max_step]``,
    reflecting at the ends) over every pitch ``p < M`` with
    ``(p - tonic) % 12`` in ``scale``.  Walks start in the middle third.
    """
    degrees = [p for p in range(M) if (p - tonic) % 12 in set(scale)]
    if len(degrees) < 3:
        raise ValueError("alphabet too small for the scale")
    rng = make_rng(seed, 0x5CA1E)
    top = len(degrees) - 1
    out = []
    for _ in range(n_seqs):
        d = int(rng.integers(len(degrees) // 3, 2 * len(degrees) // 3 + 1))
        pitches = []
        for _ in range(length):
            pitches.append(degrees[d])
            d += int(rng.integers(-max_step, max_step + 1))
            if d < 0:
                d = -d
            elif d > top:
                d = 2 * top - d
        out.append(FrameSequence.from_pitches(pitches, M))
    return out
