import sys
import os

# Add the project root to the python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest

from models.exits import ExitBank, ExitCellConfig, ExitPlacement
from models.mamba import MambaConfig, MambaModel
from models.transformer import TransformerConfig, TransformerModel

CORPUS_PATH = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'data', 'sample_corpus.txt'))


@pytest.fixture
def corpus_path():
    return CORPUS_PATH


@pytest.fixture
def tiny_transformer():
    config = TransformerConfig(n_blocks=6, d_model=16, n_heads=2, vocab_size=17, max_seq_len=64)
    return TransformerModel(config, seed=0)


@pytest.fixture
def tiny_mamba():
    config = MambaConfig(n_blocks=6, d_model=16, d_state=4, d_conv=4, n_groups=2, vocab_size=17)
    return MambaModel(config, seed=0)


@pytest.fixture
def make_bank():
    """Build an untrained exit bank for a model: make_bank(model, variant)."""
    def build(model, variant, seed=1):
        placement = ExitPlacement.default(model.n_blocks)
        cell = ExitCellConfig(d_model=model.d_model, d_state=4)
        return ExitBank(variant, placement, cell, seed=seed)
    return build


@pytest.fixture
def numeric_gradient():
    """Central-difference gradient of a scalar function of one array."""
    def gradient(fn, array, eps=1e-6):
        grad = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + eps
            plus = fn()
            array[index] = original - eps
            minus = fn()
            array[index] = original
            grad[index] = (plus - minus) / (2 * eps)
        return grad
    return gradient
