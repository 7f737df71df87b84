import numpy as np
import pytest

from lesiondet.geometry import Box


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_box(rng, lo=0.0, hi=100.0, min_side=1.0, max_side=40.0) -> Box:
    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, max_side)
    x = rng.uniform(lo, hi - w)
    y = rng.uniform(lo, hi - h)
    return Box(x, y, w, h)


def random_int_box(rng, grid=30, max_side=15) -> Box:
    w = int(rng.integers(1, max_side))
    h = int(rng.integers(1, max_side))
    x = int(rng.integers(0, grid - w))
    y = int(rng.integers(0, grid - h))
    return Box(float(x), float(y), float(w), float(h))
