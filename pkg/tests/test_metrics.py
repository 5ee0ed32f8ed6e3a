import numpy as np
import pytest

from gcfdm.errors import DegenerateMeshError
from gcfdm.graph import build_graphs
from gcfdm.mesh import Block, MultiBlockMesh
from gcfdm.metrics import MetricField, compute_metrics, covariant_velocity


class TestComputeMetrics:
    """Test cases for grid metrics"""

    def test_unit_grid(self, cavity_mesh, graphs_of):
        """Test that a unit-spaced grid has identity metrics"""
        _, _, metrics = graphs_of(cavity_mesh)
        assert np.allclose(metrics.J_inv, 1.0)
        assert np.allclose(metrics.T11, 1.0)
        assert np.allclose(metrics.T12, 0.0)
        assert np.allclose(metrics.T22, 1.0)

    def test_stretched_grid(self, two_block_mesh, graphs_of):
        """Test metrics of 0.25 x 0.5 cells on both sides of the interface"""
        _, _, metrics = graphs_of(two_block_mesh)
        assert np.allclose(metrics.x_xi, 0.25)
        assert np.allclose(metrics.y_eta, 0.5)
        assert np.allclose(metrics.J_inv, 0.125)
        assert np.allclose(metrics.xi_x, 4.0)
        assert np.allclose(metrics.eta_y, 2.0)
        assert np.allclose(metrics.T11, 2.0)
        assert np.allclose(metrics.T22, 0.5)

    def test_mirrored_block_is_degenerate(self, cavity_mesh):
        """Test that a left-handed block is rejected"""
        flipped = np.array(cavity_mesh.blocks[0].coords)[::-1]
        mesh = MultiBlockMesh((Block(flipped),))
        _, cg = build_graphs(mesh)
        with pytest.raises(DegenerateMeshError, match="block 0"):
            compute_metrics(mesh, cg)

    def test_concatenate(self, cavity_mesh, graphs_of):
        _, _, metrics = graphs_of(cavity_mesh)
        joined = MetricField.concatenate([metrics, metrics])
        assert joined.n_nodes == 2 * metrics.n_nodes


class TestCovariantVelocity:
    def test_stretched_grid(self, two_block_mesh, graphs_of):
        _, cg, metrics = graphs_of(two_block_mesh)
        velocity = np.tile([1.0, 2.0], (cg.n_nodes, 1))
        U, V = covariant_velocity(velocity, metrics)
        assert np.allclose(U, 0.5)
        assert np.allclose(V, 0.5)
