import csv
import io
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from gcfdm.boundary import FlowConditions, boundary_values
from gcfdm.errors import ConfigurationError, NonFiniteError, StorageError
from gcfdm.generators import generate_cavity
from gcfdm.gnmodel import GNConfig, GNModel, load_checkpoint, rollout
from gcfdm.graph import build_graphs
from gcfdm.optim import AdamW
from gcfdm.post import relative_mae
from gcfdm.solver import SolverConfig, direct_solve
from gcfdm.training import (
    HISTORY_COLUMNS,
    DatasetSpec,
    GeometrySpec,
    TrainConfig,
    history_csv,
    init_pool,
    make_batch,
    run_training,
    train_step,
)


@pytest.fixture
def cavity_dataset():
    """Cavity at Re 100, 200, 300, 400 on a 9x9 grid"""
    return DatasetSpec(geometries=[GeometrySpec(geometry="cavity", re_min=100, re_max=400, re_step=100, n=9)])


@pytest.fixture
def tiny_config():
    return TrainConfig(
        batch_size=2,
        batches_per_epoch=2,
        t_max=300,
        epochs=2,
        decay_epoch=1,
        latent_dim=4,
        depth=1,
        checkpoint_every=1,
        log_every=1,
        seed=3,
    )


class TestConfiguration:
    """Test cases for training and dataset configuration"""

    def test_decay_must_precede_end(self):
        with pytest.raises(ValidationError):
            TrainConfig(epochs=10, decay_epoch=10)

    def test_reynolds_range(self):
        geometry = GeometrySpec(geometry="cylinder", re_min=12, re_max=36, re_step=8)
        assert geometry.reynolds_numbers() == [12, 20, 28, 36]
        assert GeometrySpec(geometry="cavity", re_min=50).reynolds_numbers() == [50]

    def test_unknown_geometry(self):
        with pytest.raises(ValidationError):
            GeometrySpec(geometry="airfoil", re_min=10)

    def test_parameterized_dataset(self):
        dataset = DatasetSpec.parameterized()
        assert [g.geometry for g in dataset.geometries] == ["cavity", "cylinder", "double_cylinder"]
        assert dataset.geometries[0].reynolds_numbers() == [100, 200, 300, 400]
        assert dataset.geometries[0].n == 55
        assert dataset.geometries[2].reynolds_numbers() == [18, 24, 30]

    def test_double_cylinder_mesh(self):
        mesh = GeometrySpec(geometry="double_cylinder", re_min=18).build_mesh()
        assert len(mesh.blocks) == 31
        assert {p.label for p in mesh.boundaries} >= {"cylinder0", "cylinder1"}


class TestPool:
    """Test cases for the training pool"""

    def test_one_entry_per_reynolds(self, cavity_dataset):
        """Test that four Re values give four entries with BC-imposed zero fields"""
        pool = init_pool(cavity_dataset)
        assert len(pool) == 4
        assert [e.conditions.reynolds for e in pool] == [100, 200, 300, 400]
        for entry in pool:
            assert entry.t == 0
            assert np.array_equal(entry.field, entry.values)

    def test_replication(self, cavity_dataset):
        pool = init_pool(cavity_dataset, replication=2)
        assert len(pool) == 8
        assert pool[0].mesh is pool[7].mesh

    def test_empty_dataset(self):
        with pytest.raises(ConfigurationError):
            init_pool(DatasetSpec(geometries=[]))

    def test_batch_layout(self, cavity_dataset):
        pool = init_pool(cavity_dataset)
        batch = make_batch(pool[1:3])
        assert list(batch.offsets) == [0, 81, 162]
        assert batch.pg.n_nodes == 162
        assert np.array_equal(batch.re, np.concatenate([np.full(81, 200.0), np.full(81, 300.0)]))


class TestTrainStep:
    """Test cases for a single optimization step"""

    def _setup(self, dataset, config):
        pool = init_pool(dataset)
        model = GNModel(GNConfig(latent_dim=config.latent_dim, depth=config.depth, seed=config.seed))
        optimizer = AdamW(model.parameters(), lr=config.lr)
        return pool, model, optimizer

    def test_write_back_keeps_boundary_values(self, cavity_dataset, tiny_config):
        pool, model, optimizer = self._setup(cavity_dataset, tiny_config)
        record = train_step(pool, model, optimizer, tiny_config, np.random.default_rng(0), step=1)
        assert set(HISTORY_COLUMNS) <= set(record)
        visited = [e for e in pool if e.t == 1]
        assert len(visited) == 2
        for entry in visited:
            assert np.array_equal(entry.field[entry.mask], entry.values[entry.mask])
            assert not np.array_equal(entry.field, entry.values)

    def test_reset_at_t_max(self, cavity_dataset, tiny_config):
        """Test that t_max = 1 sends every visited entry back to the zero field"""
        config = tiny_config.model_copy(update={"t_max": 1})
        pool, model, optimizer = self._setup(cavity_dataset, config)
        train_step(pool, model, optimizer, config, np.random.default_rng(0))
        for entry in pool:
            assert entry.t == 0
            assert np.array_equal(entry.field, entry.values)

    def test_parameters_change(self, cavity_dataset, tiny_config):
        pool, model, optimizer = self._setup(cavity_dataset, tiny_config)
        before = model.flat().copy()
        train_step(pool, model, optimizer, tiny_config, np.random.default_rng(0))
        assert not np.array_equal(model.flat(), before)

    def test_deterministic(self, cavity_dataset, tiny_config):
        records = []
        for _ in range(2):
            pool, model, optimizer = self._setup(cavity_dataset, tiny_config)
            rng = np.random.default_rng(5)
            records.append([train_step(pool, model, optimizer, tiny_config, rng)["loss"] for _ in range(3)])
        assert records[0] == records[1]

    def test_non_finite_loss(self, cavity_dataset, tiny_config):
        pool, model, optimizer = self._setup(cavity_dataset, tiny_config)
        model.params["decoder.b2"].data = np.full(3, np.nan)
        with pytest.raises(NonFiniteError):
            train_step(pool, model, optimizer, tiny_config, np.random.default_rng(0))


class TestRunTraining:
    """Test cases for the full training loop"""

    def test_outputs(self, tmp_path, cavity_dataset, tiny_config):
        result = run_training(cavity_dataset, tiny_config, tmp_path)
        assert len(result.history) == 4
        assert result.history[0]["lr"] == pytest.approx(1e-4)
        assert result.history[-1]["lr"] == pytest.approx(1e-5)
        assert (tmp_path / "checkpoint_epoch1.ckpt").exists()
        assert not (tmp_path / "checkpoint_epoch2.ckpt").exists()
        assert np.array_equal(load_checkpoint(result.checkpoint).flat(), result.model.flat())

        rows = list(csv.reader(io.StringIO(result.history_path.read_text())))
        assert tuple(rows[0]) == HISTORY_COLUMNS
        assert len(rows) == 5
        assert float(rows[-1][3]) == result.history[-1]["loss"]

    def test_history_write_failure(self, tmp_path, cavity_dataset, tiny_config):
        with patch("gcfdm.training.write_file", side_effect=StorageError("disk full")):
            with pytest.raises(StorageError):
                run_training(cavity_dataset, tiny_config, tmp_path)

    def test_history_csv_round_trips_floats(self):
        record = {"step": 1, "epoch": 0, "lr": 1e-4, "loss": 0.1 + 0.2}
        record.update({name: 1.0 / 3.0 for name in HISTORY_COLUMNS[4:]})
        rows = list(csv.reader(io.StringIO(history_csv([record]))))
        assert float(rows[1][3]) == 0.1 + 0.2
        assert float(rows[1][4]) == 1.0 / 3.0


def rollout_error(model, n, re, iterations=300):
    """Relative velocity MAE of a rollout against a direct solve on the n x n cavity"""
    mesh = generate_cavity(n)
    conditions = FlowConditions.cavity(float(re))
    reference, _ = direct_solve(mesh, conditions, SolverConfig(method="lbfgs", max_iters=6000))
    pg, _ = build_graphs(mesh)
    mask, values = boundary_values(mesh, conditions)
    return relative_mae(rollout(model, pg, mask, values, iterations), reference)


@pytest.mark.integration
class TestTrainingAccuracy:
    """Test cases for trained-network accuracy against direct solves"""

    def test_cavity_at_re_100(self, tmp_path):
        dataset = DatasetSpec(geometries=[GeometrySpec(geometry="cavity", re_min=100, n=33)])
        config = TrainConfig(
            batch_size=4,
            batches_per_epoch=4,
            epochs=3000,
            decay_epoch=2000,
            lr=1e-3,
            latent_dim=32,
            depth=6,
            checkpoint_every=1000,
        )
        result = run_training(dataset, config, tmp_path)
        assert rollout_error(result.model, 33, 100) <= 0.05

    def test_unseen_reynolds(self, tmp_path):
        """Test that Re = 180 and 330 are predicted about as well as the trained values"""
        dataset = DatasetSpec(
            geometries=[GeometrySpec(geometry="cavity", re_min=100, re_max=400, re_step=100, n=17)]
        )
        config = TrainConfig(
            batch_size=4,
            batches_per_epoch=8,
            epochs=2000,
            decay_epoch=1500,
            lr=1e-3,
            latent_dim=32,
            depth=6,
            checkpoint_every=1000,
        )
        model = run_training(dataset, config, tmp_path).model
        trained = np.mean([rollout_error(model, 17, re) for re in (100, 200, 300, 400)])
        for re in (180, 330):
            assert rollout_error(model, 17, re) <= 2.0 * trained
