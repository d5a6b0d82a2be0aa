import pytest
import torch

from dpua.data import default_profile, generate_synthetic
from dpua.pipeline import build_vocabulary
from dpua.policy import Policy, PolicyConfig

torch.set_num_threads(1)

TINY = PolicyConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=320, dtype="float64")


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic(48, default_profile("offense"), seed=3)


@pytest.fixture(scope="session")
def vocab(corpus):
    return build_vocabulary(corpus)


@pytest.fixture
def tiny_policy(vocab):
    """Float64 policy small enough for finite-difference checks."""
    return Policy(vocab, TINY)


@pytest.fixture
def small_policy(vocab):
    return Policy(vocab, PolicyConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, seed=1))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
