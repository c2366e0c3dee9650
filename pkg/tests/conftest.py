import numpy as np
import pytest

from patchproto import EmbeddingGrid, ScoredSelection, SelectionEntry


def make_grid(rng, h, w, c, scale=1.0):
    arr = (rng.standard_normal((h, w, c)) * scale).astype(np.float32)
    arr.flags.writeable = False
    return EmbeddingGrid(arr)


def make_selection(rng, n, c, scale=1.0, width=8):
    """Hand-built ScoredSelection with random embeddings and weights."""
    entries = tuple(
        SelectionEntry(
            patch_index=(i // width, i % width),
            embedding=(rng.standard_normal(c) * scale).astype(np.float32),
            weight=float(rng.uniform(0.01, 1.0)),
        )
        for i in range(n)
    )
    return ScoredSelection(entries=entries, source_dims=(width, width, c))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
