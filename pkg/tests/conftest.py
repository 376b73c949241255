import numpy as np
import pytest

from treeclust.bench import gen_synthetic
from treeclust.core import Dataset, RngStream


@pytest.fixture
def blobs_2d() -> Dataset:
    return gen_synthetic("blobs", 2000, 2, {"centers": 4, "sigma": 0.02}, RngStream(7)).data


@pytest.fixture
def small_points() -> Dataset:
    gen = np.random.default_rng(3)
    pts = gen.uniform(-0.6, 0.6, size=(12, 2))
    return Dataset.in_ball(pts)


@pytest.fixture
def collinear() -> np.ndarray:
    xs = np.array([-0.5, -0.3, -0.1, 0.0, 0.2, 0.25, 0.6])
    return np.column_stack([xs, np.zeros_like(xs)])
