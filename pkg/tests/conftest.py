import numpy as np
import pytest

from gcfdm.generators import generate_cavity, generate_channel
from gcfdm.graph import build_graphs
from gcfdm.metrics import compute_metrics


@pytest.fixture
def cavity_mesh():
    """5x5 cavity on [0, 4]^2, so index and physical spacing are both 1"""
    return generate_cavity(5, L=4.0)


@pytest.fixture
def two_block_mesh():
    """Unit square as two 3x3 blocks glued along x = 0.5"""
    return generate_channel(5, 3, n_splits=1, length=1.0, height=1.0)


@pytest.fixture
def channel_mesh():
    return generate_channel(9, 5)


@pytest.fixture
def graphs_of():
    def build(mesh):
        pg, cg = build_graphs(mesh)
        return pg, cg, compute_metrics(mesh, cg)

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
