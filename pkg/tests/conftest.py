import numpy as np
import pytest

from vtprune import kernels
from vtprune.attention import ModelConfig, TokenSequence
from vtprune.linalg import make_rng, rand_matrix

# filled by the acceptance module, echoed after the run
ACCEPTANCE_LINES = []

SMALL = ModelConfig(hidden_dim=32, heads=4, encoder_layers=2, decoder_layers=8, seed=11)


@pytest.fixture(params=kernels.available())
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the test."""
    impl = kernels.load(request.param)
    for name in ("matmul", "softmax_rows", "attention_head", "dot_argmax"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


def make_sequence(cfg, n_pre=3, n_visual=24, n_instr=6, seed=5):
    rng = make_rng(seed)
    emb = rand_matrix(rng, n_pre + n_visual + n_instr, cfg.hidden_dim, 1.0)
    return TokenSequence.decoder_layout(emb, n_pre, n_visual, n_instr)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
