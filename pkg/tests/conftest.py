import numpy as np
import pytest

from rgae.gae import GaeParams
from rgae.mathcore import make_rng
from rgae.recurrent import BaselineRnn, GruParams, RgaeModel


def random_gae(n, M, F, K, seed, scale=1.2):
    rng = make_rng(seed, 1)
    return GaeParams(
        Q=rng.uniform(-scale, scale, (F, n * M)),
        V=rng.uniform(-scale, scale, (F, M)),
        W_m=rng.uniform(-scale, scale, (K, F)),
        n=n,
    )


def random_gru(D, H, O, seed, scale=1.2):
    rng = make_rng(seed, 2)
    u = lambda *s: rng.uniform(-scale, scale, s)
    return GruParams(u(H, D), u(H, D), u(H, D), u(H, H), u(H, H), u(H, H), u(H), u(H), u(H), u(O, H))


def random_rgae(n=2, M=3, F=2, K=2, H=2, seed=0):
    return RgaeModel(random_gae(n, M, F, K, seed), random_gru(K, H, K, seed))


def random_baseline(M=3, H=3, window=2, seed=0):
    return BaselineRnn(random_gru(window * M, H, M, seed), window)


def random_pitch_batch(B, T, M, seed):
    rng = make_rng(seed, 3)
    return np.eye(M)[rng.integers(0, M, (B, T))]


@pytest.fixture
def rng():
    return make_rng(1234)


# -- acceptance criteria summary ---------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, passed: bool, detail: str):
    """Note the outcome of (part of) an acceptance criterion; printed at the end of the run."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'} - " + "; ".join(d for _, d in parts))
