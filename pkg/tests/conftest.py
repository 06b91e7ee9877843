import numpy as np
import pytest

from quantmark.model import LanguageModel, ModelConfig, train_base

# lines collected by the acceptance suite, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


TINY_CORPUS = [
    "The red fox found the box.",
    "Anna liked the old map.",
    "We are ready!",
    "Sam waited near the lake.",
    "A quiet bird sat on the hill.",
    "They have two keys.",
]


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(context_len=48, d_model=16, n_heads=2, n_layers=1, seed=0)


@pytest.fixture(scope="session")
def tiny_trained(tiny_config):
    """A tiny model trained briefly on six sentences (shared, never mutate)."""
    m = LanguageModel(tiny_config)
    train_base(m, TINY_CORPUS, 150, 3e-3, batch_size=6)
    return m


@pytest.fixture
def tiny_model(tiny_trained):
    return tiny_trained.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
