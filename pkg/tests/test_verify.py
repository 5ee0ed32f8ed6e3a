import pytest

from gcfdm.generators import generate_cavity, generate_channel, generate_cylinder_channel
from gcfdm.verify import gradient_check_fields, gradient_check_model, oracle_equivalence, split_consistency


class TestOracleEquivalence:
    """Test cases for message passing against the loop reference"""

    def test_two_block_square(self, two_block_mesh):
        report = oracle_equivalence(two_block_mesh, trials=4, seed=1, threads=2)
        assert report["trials"] == 4
        assert report["max_difference"] <= 1e-12

    def test_seed_reproducible(self, cavity_mesh):
        first = oracle_equivalence(cavity_mesh, trials=3, seed=9, threads=1)
        second = oracle_equivalence(cavity_mesh, trials=3, seed=9, threads=3)
        assert first == second


class TestSplitConsistency:
    """Test cases for residual invariance under block splitting"""

    def test_cavity(self):
        assert split_consistency(generate_cavity(9), block=0, i_split=4, seed=2) <= 1e-12

    def test_channel_with_outlet(self):
        """Test a split that moves the outlet patch to the new block"""
        mesh = generate_channel(13, 5, n_splits=1)
        assert split_consistency(mesh, block=1, i_split=3, seed=4, re=1000.0) <= 1e-12


class TestGradientChecks:
    """Test cases for reverse-mode gradients of the residual loss"""

    def test_field_gradient(self, two_block_mesh):
        assert gradient_check_fields(two_block_mesh, seed=0, re=20.0, max_coords=30) < 1e-6

    def test_model_gradient(self, cavity_mesh):
        error = gradient_check_model(cavity_mesh, seed=0, re=100.0, latent_dim=4, depth=1, max_coords=4)
        assert error < 1e-5

    @pytest.mark.integration
    def test_cylinder_gradient(self):
        mesh = generate_cylinder_channel(resolution="coarse")
        assert gradient_check_fields(mesh, seed=1, re=1000.0, max_coords=40) < 1e-6


@pytest.mark.integration
class TestCylinderOracle:
    def test_hundred_trials(self):
        """Test message passing against the loop reference on the O-grid cylinder mesh"""
        report = oracle_equivalence(generate_cylinder_channel(resolution="coarse"), trials=100, seed=0)
        assert report["trials"] == 100
        assert report["max_difference"] <= 1e-12
