"""Shared fixtures: an offline handwritten-digit corpus in IDX layout."""

import os

import numpy as np
import pytest

from mest import data as datamod


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Materialize the 8x8 scikit-learn digits as IDX train/test files.

    Serves as a small stand-in for a standard handwritten-digit corpus so
    the whole suite runs offline.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.clip(d.images * 16, 0, 255).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    root = tmp_path_factory.mktemp("digits")
    datamod.write_idx(images[:1200], labels[:1200],
                      root / "train-images-idx3-ubyte",
                      root / "train-labels-idx1-ubyte")
    datamod.write_idx(images[1200:], labels[1200:],
                      root / "t10k-images-idx3-ubyte",
                      root / "t10k-labels-idx1-ubyte")
    os.environ["MEST_DATA_DIR"] = str(root)
    return str(root)
