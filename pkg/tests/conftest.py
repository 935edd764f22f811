import numpy as np
import pytest

from aupipe.core import N_AUS, LabelledDataset


def make_ds(labels, features=None, videos=None, frames=None):
    labels = np.asarray(labels, dtype=np.int8)
    n = labels.shape[0]
    if labels.shape[1] < N_AUS:
        labels = np.hstack([labels, np.zeros((n, N_AUS - labels.shape[1]), dtype=np.int8)])
    if videos is None:
        videos = ["v1"] * n
    if frames is None:
        frames = np.arange(n)
    if features is None:
        features = np.arange(n, dtype=float).reshape(n, 1)
    return LabelledDataset(videos, frames, labels, features)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def balanced_ds(rng):
    """200 frames, every AU has both polarities, a few INVALID entries."""
    labels = rng.integers(0, 2, size=(200, N_AUS)).astype(np.int8)
    labels[0] = 1
    labels[1] = 0
    labels[5:8, 7] = -1
    videos = [f"v{i // 20:02d}" for i in range(200)]
    frames = [i % 20 for i in range(200)]
    return LabelledDataset(videos, frames, labels, rng.standard_normal((200, 6)))
