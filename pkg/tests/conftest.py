import numpy as np
import pytest

from qmatch.data import TabularDataset


def make_fixture_dataset(n=600, num_numeric=6, num_classes=3, seed=0,
                         name="fixture"):
    """Synthetic tabular classification data with class-dependent structure:
    gaussian clusters in the numeric features plus one label-correlated and
    one noise categorical column."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    centers = rng.normal(0.0, 2.0, size=(num_classes, num_numeric))
    numeric = centers[labels] + rng.normal(0.0, 1.0, size=(n, num_numeric))
    # categorical 0: noisy copy of the label; categorical 1: pure noise
    cat0 = np.where(rng.random(n) < 0.7, labels, rng.integers(0, num_classes, size=n))
    cat1 = rng.integers(0, 4, size=n)
    features = np.concatenate([numeric, cat0[:, None], cat1[:, None]], axis=1).astype(float)
    cat_vocab = {num_numeric: [f"c{i}" for i in range(num_classes)],
                 num_numeric + 1: [f"d{i}" for i in range(4)]}
    return TabularDataset(features, cat_vocab, labels.astype(np.int64), name=name)


@pytest.fixture
def fixture_dataset():
    return make_fixture_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
