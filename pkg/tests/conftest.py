import numpy as np
import pytest
import torch

from ufo.backbone import ModelConfig, UnifiedTransformer
from ufo.corpus import corpus_vocabulary


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def vocab():
    return corpus_vocabulary()


@pytest.fixture
def model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab))
    return UnifiedTransformer(cfg, vocab).double()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance report: one line per criterion, printed after the run

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    def _record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
