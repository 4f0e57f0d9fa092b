import numpy as np
import pytest
from scipy.signal import convolve2d

from rcps.core import ImageTensor, PredictionTriple


def smooth_field(rng, height, width, lo=0.2, hi=0.8):
    """Low-frequency random image in [lo, hi]; learnable by a small patch model."""
    raw = rng.uniform(0.0, 1.0, (height, width))
    sm = convolve2d(raw, np.ones((5, 5)) / 25.0, mode="same", boundary="symm")
    sm = (sm - sm.min()) / max(sm.max() - sm.min(), 1e-12)
    return lo + (hi - lo) * sm


def random_triple(rng, height=6, width=6):
    """A valid random prediction triple with strictly positive lengths."""
    return PredictionTriple(
        prediction=ImageTensor(rng.uniform(0.2, 0.8, (height, width))),
        lower_length=ImageTensor(rng.uniform(0.01, 0.3, (height, width))),
        upper_length=ImageTensor(rng.uniform(0.01, 0.3, (height, width))),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
