import numpy as np
import pytest

from ntpp.codec import N_SPECIALS, DualTokenStream
from ntpp.model import ModelConfig, ModelParams


def random_stream(rng, T, D, vocab, sil_prob=0.3):
    """Random stream over SIL + content ids (BOS never appears)."""
    def grid():
        g = rng.integers(N_SPECIALS, N_SPECIALS + vocab, size=(T, D))
        g[rng.random(T) < sil_prob] = 0
        return g
    return DualTokenStream(grid(), grid())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    return ModelParams.init(ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab=6, max_steps=40), seed=5)


@pytest.fixture
def tiny_rvq_params():
    return ModelParams.init(ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab=6, depth=2, max_steps=40), seed=6)


# one pass/fail line per acceptance criterion in the terminal summary
_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            _ACCEPTANCE[self.number] = ("PASS", self.title, "")
        else:
            detail = str(exc).splitlines()[0][:120] if str(exc) else exc_type.__name__
            _ACCEPTANCE[self.number] = ("FAIL", self.title, detail)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"criterion {n:2d}: {status}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
