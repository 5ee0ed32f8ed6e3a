"""
Label-free training of the graph network against GC-FDM residuals.

The training pool holds one entry per (geometry, Re) combination. Each
step samples a minibatch of entries, runs the network once on their
disjoint union, imposes the Dirichlet data on its output, and minimizes
the residual loss. Predictions are written back to the pool as the next
inputs, and entries are reset to the zero field every ``t_max`` visits.
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.boundary import FlowConditions, apply_dirichlet, boundary_values
from gcfdm.config import settings
from gcfdm.errors import ConfigurationError, NonFiniteError
from gcfdm.generators import (
    generate_cavity,
    generate_channel,
    generate_cylinder_channel,
    generate_double_cylinder_channel,
)
from gcfdm.gnmodel import GNConfig, GNModel, save_checkpoint
from gcfdm.graph import CompGraph, PhysGraph, batch_computational, batch_physical, build_graphs
from gcfdm.mesh import MultiBlockMesh
from gcfdm.metrics import MetricField, compute_metrics
from gcfdm.optim import AdamW, StepDecay
from gcfdm.residual import TERM_NAMES, assemble_residuals_gc, loss, loss_terms
from gcfdm.storage import write_file

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "lr", "loss") + TERM_NAMES


class TrainConfig(BaseModel):
    batch_size: int = Field(default=4, gt=0)
    batches_per_epoch: int = Field(default=24, gt=0)
    t_max: int = Field(default=300, gt=0)
    lr: float = Field(default=1e-4, gt=0)
    decay_epoch: int = Field(default=10000, gt=0)
    lr_decay_factor: float = Field(default=0.1, gt=0)
    epochs: int = Field(default=25000, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    loss_weights: Tuple[float, float, float, float] = tuple(settings.LOSS_WEIGHTS)
    seed: int = 0
    replication: int = Field(default=1, gt=0)
    checkpoint_every: int = Field(default=500, gt=0)
    log_every: int = Field(default=100, gt=0)
    latent_dim: int = Field(default=64, gt=0)
    depth: int = Field(default=12, gt=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "TrainConfig":
        if self.decay_epoch >= self.epochs:
            raise ValueError(f"decay_epoch ({self.decay_epoch}) must be below epochs ({self.epochs})")
        return self


class GeometrySpec(BaseModel):
    """One geometry of the pool with its Re range; a missing step means a single Re"""

    geometry: Literal["cavity", "channel", "cylinder", "double_cylinder"]
    re_min: float = Field(gt=0)
    re_max: Optional[float] = None
    re_step: Optional[float] = None
    n: int = Field(default=33, ge=3)
    ny: int = Field(default=17, ge=3)
    resolution: str = "coarse"

    def reynolds_numbers(self) -> List[float]:
        if self.re_max is None or self.re_step is None or self.re_max <= self.re_min:
            return [self.re_min]
        count = int(np.floor((self.re_max - self.re_min) / self.re_step + 1e-9)) + 1
        return [self.re_min + k * self.re_step for k in range(count)]

    def build_mesh(self) -> MultiBlockMesh:
        if self.geometry == "cavity":
            return generate_cavity(self.n)
        if self.geometry == "channel":
            return generate_channel(self.n, self.ny)
        if self.geometry == "cylinder":
            return generate_cylinder_channel(resolution=self.resolution)
        return generate_double_cylinder_channel(resolution=self.resolution)


class DatasetSpec(BaseModel):
    geometries: List[GeometrySpec]

    @classmethod
    def parameterized(cls) -> "DatasetSpec":
        """Cavity Re 100..400 step 100 at 55x55, single cylinder Re 12..36 step 8, double cylinder Re 18..30 step 6"""
        return cls(
            geometries=[
                GeometrySpec(geometry="cavity", re_min=100, re_max=400, re_step=100, n=55),
                GeometrySpec(geometry="cylinder", re_min=12, re_max=36, re_step=8, resolution="medium"),
                GeometrySpec(geometry="double_cylinder", re_min=18, re_max=30, re_step=6, resolution="medium"),
            ]
        )


@dataclass(eq=False)
class PoolEntry:
    mesh_id: str
    mesh: MultiBlockMesh
    pg: PhysGraph
    cg: CompGraph
    metrics: MetricField
    conditions: FlowConditions
    mask: np.ndarray
    values: np.ndarray
    field: np.ndarray
    t: int = 0

    def reset(self) -> None:
        self.field = impose_bc(np.zeros_like(self.field), self)
        self.t = 0


def impose_bc(field, entry: PoolEntry):
    """Hard overwrite of the entry's Dirichlet nodes"""
    return apply_dirichlet(field, entry.mask, entry.values)


def init_pool(dataset: DatasetSpec, replication: int = 1) -> List[PoolEntry]:
    """
    One entry per (geometry, Re), repeated ``replication`` times, with zero fields.

    Raises:
        ConfigurationError: empty dataset
    """
    if not dataset.geometries:
        raise ConfigurationError("Dataset lists no geometries")
    pool: List[PoolEntry] = []
    for g_index, geometry in enumerate(dataset.geometries):
        mesh = geometry.build_mesh()
        pg, cg = build_graphs(mesh)
        metrics = compute_metrics(mesh, cg)
        for re in geometry.reynolds_numbers():
            conditions = FlowConditions.for_geometry(geometry.geometry, re)
            mask, values = boundary_values(mesh, conditions)
            for copy in range(replication):
                entry = PoolEntry(
                    mesh_id=f"{geometry.geometry}-{g_index}",
                    mesh=mesh,
                    pg=pg,
                    cg=cg,
                    metrics=metrics,
                    conditions=conditions,
                    mask=mask,
                    values=values,
                    field=np.zeros((mesh.n_nodes, 3)),
                )
                entry.reset()
                pool.append(entry)
    logger.info(f"Training pool: {len(pool)} entries from {len(dataset.geometries)} geometries")
    return pool


@dataclass(eq=False)
class Batch:
    """Disjoint union of pool entries"""

    entries: List[PoolEntry]
    pg: PhysGraph
    cg: CompGraph
    metrics: MetricField
    re: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    field: np.ndarray
    offsets: Optional[np.ndarray] = None


def make_batch(entries: Sequence[PoolEntry]) -> Batch:
    entries = list(entries)
    offsets = np.concatenate([[0], np.cumsum([e.mesh.n_nodes for e in entries])])
    return Batch(
        entries=entries,
        pg=batch_physical([e.pg for e in entries]),
        cg=batch_computational([e.cg for e in entries]),
        metrics=MetricField.concatenate([e.metrics for e in entries]),
        re=np.concatenate([np.full(e.cg.n_nodes, e.conditions.viscous_re) for e in entries]),
        mask=np.concatenate([e.mask for e in entries]),
        values=np.concatenate([e.values for e in entries]),
        field=np.concatenate([e.field for e in entries]),
        offsets=offsets,
    )


def train_step(
    pool: List[PoolEntry],
    model: GNModel,
    optimizer: AdamW,
    config: TrainConfig,
    rng: np.random.Generator,
    step: int = 0,
    epoch: int = 0,
) -> Dict[str, float]:
    """
    Sample, predict, impose BCs, minimize the residual loss, write back.

    Raises:
        NonFiniteError: the loss is not finite
    """
    size = min(config.batch_size, len(pool))
    picks = rng.choice(len(pool), size=size, replace=False)
    batch = make_batch([pool[k] for k in picks])

    optimizer.zero_grad()
    with ad.Tape() as tape:
        predicted = impose_bc_batch(model(batch.pg, Tensor(batch.field)), batch)
        R = assemble_residuals_gc(predicted, batch.metrics, batch.cg, batch.re)
        total = loss(R, config.loss_weights)
    value = total.item()
    if not np.isfinite(value):
        error_msg = (
            f"Non-finite loss at step {step} (epoch {epoch}); entries {[pool[k].mesh_id for k in picks]} "
            f"at t={[pool[k].t for k in picks]}"
        )
        logger.error(error_msg)
        raise NonFiniteError(error_msg)
    ad.backward(total, tape)
    optimizer.step()

    for entry, start, end in zip(batch.entries, batch.offsets[:-1], batch.offsets[1:]):
        entry.field = predicted.data[start:end].copy()
        entry.t += 1
        if entry.t >= config.t_max:
            entry.reset()

    record = {"step": step, "epoch": epoch, "lr": optimizer.lr, "loss": value}
    record.update({name: term.item() for name, term in zip(TERM_NAMES, loss_terms(R))})
    return record


def impose_bc_batch(predicted: Tensor, batch: Batch) -> Tensor:
    return apply_dirichlet(predicted, batch.mask, batch.values)


def history_csv(history: Sequence[Dict[str, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for record in history:
        writer.writerow([record["step"], record["epoch"]] + [repr(float(record[c])) for c in HISTORY_COLUMNS[2:]])
    return buffer.getvalue()


@dataclass(eq=False)
class TrainingResult:
    model: GNModel
    history: List[Dict[str, float]]
    checkpoint: Path
    history_path: Path
    pool: List[PoolEntry]


def run_training(
    dataset: DatasetSpec, config: TrainConfig, output_dir: Union[str, Path, None] = None
) -> TrainingResult:
    """
    epochs x batches_per_epoch steps with a step-decay learning rate,
    periodic checkpoints and a loss-history CSV.

    Raises:
        NonFiniteError: a step produced a non-finite loss
        StorageError: a checkpoint or the history could not be written
    """
    output_dir = Path(output_dir or settings.GCFDM_OUTPUT_DIR)
    rng = np.random.default_rng(config.seed)
    pool = init_pool(dataset, config.replication)
    model = GNModel(GNConfig(latent_dim=config.latent_dim, depth=config.depth, seed=config.seed))
    optimizer = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    schedule = StepDecay(config.lr, config.decay_epoch, config.lr_decay_factor)
    logger.info(
        f"Training {model.n_params} parameters for {config.epochs} epochs x {config.batches_per_epoch} batches"
    )

    history: List[Dict[str, float]] = []
    step = 0
    for epoch in range(config.epochs):
        optimizer.lr = schedule(epoch)
        for _ in range(config.batches_per_epoch):
            step += 1
            record = train_step(pool, model, optimizer, config, rng, step=step, epoch=epoch)
            history.append(record)
            if step % config.log_every == 0:
                logger.info(f"step {step} epoch {epoch}: loss {record['loss']:.4e} (lr {record['lr']:.1e})")
        if (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
            save_checkpoint(model, output_dir / f"checkpoint_epoch{epoch + 1}.ckpt")

    checkpoint = save_checkpoint(model, output_dir / "model.ckpt")
    history_path = write_file(output_dir / "history.csv", history_csv(history))
    logger.info(f"Training finished after {step} steps; final loss {history[-1]['loss']:.4e}")
    return TrainingResult(model, history, checkpoint, history_path, pool)
