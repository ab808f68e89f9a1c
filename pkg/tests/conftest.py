import numpy as np
import pytest

from steerdec.models import ModelConfig, Role
from steerdec.transformer import TransformerModel

VOCAB = 8


def _numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f()
        x[idx] = orig - eps
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def verifier_config():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_mlp=32, vocab_size=VOCAB, max_seq_len=48, tap_layers=(0, 1, 1))


@pytest.fixture
def drafter_config():
    return ModelConfig(n_layers=2, d_model=8, n_heads=2, d_mlp=16, vocab_size=VOCAB, max_seq_len=48)


@pytest.fixture
def verifier(verifier_config):
    return TransformerModel.init(verifier_config, Role.VERIFIER, seed=0, dtype=np.float64, std=0.5)


@pytest.fixture
def drafter(drafter_config):
    return TransformerModel.init(drafter_config, Role.DRAFTER, seed=1, dtype=np.float64, std=0.5)


@pytest.fixture
def sequences():
    rng = np.random.default_rng(7)
    return [rng.integers(0, VOCAB, size=12).tolist() for _ in range(4)]
