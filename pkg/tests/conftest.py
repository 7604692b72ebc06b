import numpy as np
import pytest

from biseq.combinators import ModelSpec
from biseq.embed import Vocabulary
from biseq.train import Batch

# small dims keep full-model finite differences cheap
SMALL = ModelSpec(rnn_size=6, embed_dim=8, filter_windows=(1, 2), num_filters=3)


def small_vocab(n=7):
    return Vocabulary([f"w{i}" for i in range(n)])


def small_batch(rng, vocab_size=10, num_classes=2):
    """Three rows with ragged contexts and targets, right-padded."""
    cm = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0]], bool)
    tm = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], bool)
    ctx = rng.integers(3, vocab_size, size=cm.shape)
    tgt = rng.integers(3, vocab_size, size=tm.shape)
    ctx[~cm] = 0
    tgt[~tm] = 0
    y = rng.integers(0, num_classes, size=3)
    return Batch(ctx, cm, tgt, tm, y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
