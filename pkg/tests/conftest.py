import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynakv import model as tm

CORPUS_PATH = Path(__file__).parent.parent / "data" / "sample_corpus.txt"


@pytest.fixture(scope="session")
def corpus_ids():
    data = CORPUS_PATH.read_bytes()
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


@pytest.fixture(scope="session")
def tiny_config():
    return tm.ModelConfig(n_layers=2, n_heads=2, head_dim=4, d_model=16, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return tm.ToyTransformer(tiny_config, seed=7)


@pytest.fixture(scope="session")
def trained_tiny(tiny_config, corpus_ids):
    """A briefly trained small model shared by tests that need non-random
    predictions (eviction quality, analyze smoke)."""
    model = tm.ToyTransformer(tiny_config, seed=3)
    cfg = tm.TrainConfig(alpha=0.5, steps=200, batch=4, seq_len=48, seed=3)
    tm.train(model, corpus_ids[:120_000], cfg)
    return model
