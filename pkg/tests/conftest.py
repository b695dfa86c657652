import numpy as np
import pytest

from diversitylab.corpus import DialoguePair
from diversitylab.model import EOS, ModelConfig, Seq2Seq

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def toy_model(vocab=8, dim=6, attention="none", heads=1, seed=0, embed=None, tie=False):
    cfg = ModelConfig(vocab, embed or dim, dim, attention, heads, tie)
    return Seq2Seq(cfg, seed=seed)


def random_pair(rng, vocab=8, src_len=4, tgt_len=4):
    src = rng.integers(4, vocab, size=src_len).tolist()
    tgt = rng.integers(4, vocab, size=tgt_len - 1).tolist() + [EOS]
    return DialoguePair(src, tgt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
