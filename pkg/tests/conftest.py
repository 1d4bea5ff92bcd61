import sys
import numpy as np
import pytest

from hybridcl.model import ModelConfig, init_model
from hybridcl.synth import Utterance


@pytest.fixture
def tiny_config():
    return ModelConfig(feat_dim=4, hidden_dim=8, vocab_size=5, conv_kernel=3)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=7)


def random_utterance(rng, cfg, T=None, U=None, task_id=1):
    U = int(rng.integers(1, 4)) if U is None else U
    T = int(rng.integers(U + 2, 6)) if T is None else T
    targets = tuple(int(s) for s in rng.integers(1, cfg.vocab_size, size=U))
    return Utterance(rng.normal(size=(T, cfg.feat_dim)), targets, False, task_id)


@pytest.fixture
def make_utt():
    return random_utterance


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
