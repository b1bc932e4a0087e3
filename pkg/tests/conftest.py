import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_symmetric(g, d, scale=1.0):
    A = g.standard_normal((d, d)) * scale
    return (A + A.T) / 2


def random_psd(g, d, rank=None):
    rank = d if rank is None else rank
    B = g.standard_normal((d, rank))
    return B @ B.T
