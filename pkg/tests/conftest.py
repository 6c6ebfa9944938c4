import numpy as np
import pytest

from coregate.dataio import MultiScaleFeatures


def random_features(rng, channel_counts=(3, 5), grids=((3, 3), (2, 2))):
    """One image's multi-scale feature maps with seeded values."""
    scales = [rng.normal(size=(c, h, w)).astype(np.float32)
              for c, (h, w) in zip(channel_counts, grids)]
    return MultiScaleFeatures(scales=tuple(scales))


def unit_rows(rng, n, dim):
    """Row-normalized random matrix (the embedding invariant)."""
    m = rng.normal(size=(n, dim))
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
