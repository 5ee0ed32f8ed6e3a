import numpy as np
import pytest

from gcfdm.autodiff import Tensor
from gcfdm.graph import (
    ETA,
    MISSING,
    XI,
    batch_computational,
    batch_physical,
    build_graphs,
    gather,
    scatter_average,
)


class TestPhysicalGraph:
    """Test cases for the deduplicated physical graph"""

    def test_counts(self, two_block_mesh):
        """Test nodes, directed edges and cells of the 5x3 square"""
        pg, _ = build_graphs(two_block_mesh)
        assert pg.n_nodes == 15
        assert pg.n_edges == 44
        assert pg.n_cells == 8

    def test_edges_are_bidirectional(self, two_block_mesh):
        pg, _ = build_graphs(two_block_mesh)
        forward = set(zip(pg.senders.tolist(), pg.receivers.tolist()))
        assert forward == {(r, s) for s, r in forward}

    def test_cells_counterclockwise(self, cavity_mesh):
        """Test that every quad has positive signed area"""
        pg, _ = build_graphs(cavity_mesh)
        xy = pg.coords[pg.cells]
        x, y = xy[..., 0], xy[..., 1]
        area = 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
        assert np.all(area > 0.0)

    def test_cell_edges_follow_cells(self, cavity_mesh):
        pg, _ = build_graphs(cavity_mesh)
        for cell, edges in zip(pg.cells, pg.cell_edges):
            for k in range(4):
                assert pg.senders[edges[k]] == cell[k]
                assert pg.receivers[edges[k]] == cell[(k + 1) % 4]

    def test_cells_per_node(self, cavity_mesh):
        pg, _ = build_graphs(cavity_mesh)
        assert pg.cells_per_node[0] == 1
        assert pg.cells_per_node[6] == 4


class TestComputationalGraph:
    """Test cases for the block-separated graph and its halo neighbours"""

    def test_single_block_is_identity(self, cavity_mesh):
        pg, cg = build_graphs(cavity_mesh)
        assert cg.n_nodes == pg.n_nodes == 25
        assert np.array_equal(cg.index_block, np.arange(25))
        assert cg.duplicate_groups == []

    def test_interface_duplicates(self, two_block_mesh):
        """Test that the three shared nodes appear in both blocks"""
        _, cg = build_graphs(two_block_mesh)
        assert cg.n_nodes == 18
        assert cg.n_phys == 15
        assert len(cg.duplicate_groups) == 3
        assert all(g.size == 2 for g in cg.duplicate_groups)

    def test_halo_neighbours(self, two_block_mesh):
        """Test that interface nodes see the first node inward of the other block"""
        _, cg = build_graphs(two_block_mesh)
        left = two_block_mesh.raw_index(0, 2, 1)
        right = two_block_mesh.raw_index(1, 0, 1)
        assert cg.plus[left, XI] == two_block_mesh.raw_index(1, 1, 1)
        assert cg.minus[right, XI] == two_block_mesh.raw_index(0, 1, 1)
        assert cg.plus_axis[left, XI] == XI
        assert cg.plus_sign[left, XI] == 1.0

    def test_physical_boundaries_missing(self, two_block_mesh):
        _, cg = build_graphs(two_block_mesh)
        low, high = cg.closure_nodes(XI)
        assert low.size == 3
        assert high.size == 3
        low, high = cg.closure_nodes(ETA)
        assert low.size == high.size == 6
        assert np.all(cg.minus[low, ETA] == MISSING)

    def test_central_difference_exact_for_linear(self, two_block_mesh):
        """Test that the stencil with halos and closures differentiates x exactly"""
        _, cg = build_graphs(two_block_mesh)
        x = two_block_mesh.raw_coords()[:, 0]
        assert np.allclose(cg.central_operator(XI).apply(x, cg.n_nodes), 0.25, atol=1e-14)
        assert np.allclose(cg.central_operator(ETA).apply(x, cg.n_nodes), 0.0, atol=1e-14)

    def test_outlet_normal(self, channel_mesh):
        _, cg = build_graphs(channel_mesh)
        assert np.allclose(cg.normal[cg.outlet], (1.0, 0.0))
        assert np.count_nonzero(cg.outlet) == 3

    def test_dirichlet_mask(self, cavity_mesh):
        _, cg = build_graphs(cavity_mesh)
        assert np.count_nonzero(cg.dirichlet) == 16


class TestGatherScatter:
    """Test cases for moving values between the two graphs"""

    def test_gather_then_average_is_identity(self, two_block_mesh, rng):
        _, cg = build_graphs(two_block_mesh)
        x = rng.normal(size=(15, 3))
        assert np.allclose(scatter_average(gather(x, cg), cg), x)

    def test_average_of_copies(self, two_block_mesh):
        """Test that duplicate copies are averaged, not summed"""
        _, cg = build_graphs(two_block_mesh)
        r = np.zeros(cg.n_nodes)
        group = cg.duplicate_groups[0]
        r[group] = (1.0, 3.0)
        out = scatter_average(r, cg)
        assert out[cg.index_block[group[0]]] == pytest.approx(2.0)

    def test_tensor_path_matches_numpy(self, two_block_mesh, rng):
        _, cg = build_graphs(two_block_mesh)
        r = rng.normal(size=(cg.n_nodes, 2))
        assert np.allclose(scatter_average(Tensor(r), cg).data, scatter_average(r, cg))


class TestBatching:
    """Test cases for disjoint-union batches"""

    def test_batch_offsets(self, cavity_mesh, two_block_mesh):
        pg_a, cg_a = build_graphs(cavity_mesh)
        pg_b, cg_b = build_graphs(two_block_mesh)
        pg = batch_physical([pg_a, pg_b])
        cg = batch_computational([cg_a, cg_b])
        assert pg.n_nodes == 40
        assert pg.n_edges == pg_a.n_edges + pg_b.n_edges
        assert cg.n_nodes == 43
        assert cg.n_phys == 40
        assert np.array_equal(cg.index_block[25:], cg_b.index_block + 25)
        shifted = cg.plus[25:, XI]
        assert np.array_equal(shifted, np.where(cg_b.plus[:, XI] == MISSING, MISSING, cg_b.plus[:, XI] + 25))

    def test_batched_operator_matches_members(self, cavity_mesh, two_block_mesh):
        _, cg_a = build_graphs(cavity_mesh)
        _, cg_b = build_graphs(two_block_mesh)
        cg = batch_computational([cg_a, cg_b])
        x = np.concatenate([cavity_mesh.raw_coords()[:, 1], two_block_mesh.raw_coords()[:, 1]])
        out = cg.central_operator(ETA).apply(x, cg.n_nodes)
        assert np.allclose(out[:25], 1.0)
        assert np.allclose(out[25:], 0.5)
