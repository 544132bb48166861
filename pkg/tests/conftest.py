import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from datamodel import make_concentric_rings, make_gaussian_blobs  # noqa: E402


@pytest.fixture
def rng():
    """Fresh seeded generator for building random test instances."""
    return np.random.default_rng(20240601)


@pytest.fixture
def blobs():
    """Two well separated blobs, 10 samples per class."""
    return make_gaussian_blobs(c=2, per_class=10, d=2, spread=0.5, seed=3)


@pytest.fixture
def rings():
    return make_concentric_rings(per_class=30, noise=0.05, seed=4)


@pytest.fixture
def write_file(tmp_path):
    """Write text to a file under tmp_path and return its path."""

    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write
