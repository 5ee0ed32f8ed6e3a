"""
Encoder-processor-decoder graph network with cell-based message passing.

Node inputs are [u, v, p, one-hot node type]; edge inputs are
[z_r - z_s, |z_r - z_s|, f_r - f_s]. Each processor block updates edges
from [e_rs, x_r, x_s], averages the four edges of every quad cell into a
cell feature, and updates nodes from [x_r, mean of incident cells].
Every MLP is Linear-SiLU-Linear; all but the decoder end in a LayerNorm.
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.boundary import apply_dirichlet
from gcfdm.errors import ConfigurationError, StorageError
from gcfdm.graph import PhysGraph
from gcfdm.mesh import NodeType
from gcfdm.residual import FlowField
from gcfdm.storage import write_file

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCFDMCKP"
CHECKPOINT_VERSION = 1

N_NODE_TYPES = int(NodeType.SIZE)
NODE_INPUTS = 3 + N_NODE_TYPES
EDGE_INPUTS = 6
OUTPUTS = 3

Params = Dict[str, Tensor]


class GNConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    latent_dim: int = Field(default=64, gt=0)
    depth: int = Field(default=12, gt=0)
    seed: int = 0


def _mlp_shapes(prefix: str, n_in: int, hidden: int, n_out: int, layernorm: bool) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = [
        (f"{prefix}.w1", (n_in, hidden)),
        (f"{prefix}.b1", (hidden,)),
        (f"{prefix}.w2", (hidden, n_out)),
        (f"{prefix}.b2", (n_out,)),
    ]
    if layernorm:
        shapes += [(f"{prefix}.gamma", (n_out,)), (f"{prefix}.beta", (n_out,))]
    return shapes


def parameter_shapes(config: GNConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes in declaration (and checkpoint) order"""
    d = config.latent_dim
    shapes = _mlp_shapes("encoder.node", NODE_INPUTS, d, d, True)
    shapes += _mlp_shapes("encoder.edge", EDGE_INPUTS, d, d, True)
    for k in range(config.depth):
        shapes += _mlp_shapes(f"processor.{k}.edge", 3 * d, d, d, True)
        shapes += _mlp_shapes(f"processor.{k}.node", 2 * d, d, d, True)
    shapes += _mlp_shapes("decoder", d, d, OUTPUTS, False)
    return shapes


def init_params(config: GNConfig) -> Params:
    """Weights and biases uniform in +-sqrt(1/fan_in); LayerNorm scale 1 and shift 0"""
    rng = np.random.default_rng(config.seed)
    params: Params = OrderedDict()
    fan_in = None
    for name, shape in parameter_shapes(config):
        kind = name.rsplit(".", 1)[1]
        if kind.startswith("w"):
            fan_in = shape[0]
            data = rng.uniform(-1.0, 1.0, size=shape) * np.sqrt(1.0 / fan_in)
        elif kind.startswith("b"):
            data = rng.uniform(-1.0, 1.0, size=shape) * np.sqrt(1.0 / fan_in)
        elif kind == "gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class GNModel:
    """Parameters of the network together with its configuration"""

    def __init__(self, config: Optional[GNConfig] = None, params: Optional[Params] = None):
        self.config = config or GNConfig()
        self.params = params if params is not None else init_params(self.config)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        if flat.size != self.n_params:
            raise ConfigurationError(f"Expected {self.n_params} parameters, got {flat.size}")
        position = 0
        for p in self.params.values():
            p.data = flat[position : position + p.size].reshape(p.shape).astype(np.float64)
            position += p.size

    def __call__(self, pg: PhysGraph, field) -> Tensor:
        return forward(pg, field, self.params, self.config)


def mlp(x: Tensor, params: Params, prefix: str, layernorm: bool = True) -> Tensor:
    h = ad.silu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    y = ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    if layernorm:
        y = ad.layernorm(y, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])
    return y


def node_features(pg: PhysGraph, field) -> Tensor:
    field = field if isinstance(field, Tensor) else Tensor(field)
    one_hot = np.eye(N_NODE_TYPES)[pg.node_type]
    return ad.concat([field, Tensor(one_hot)], axis=1)


def edge_features(pg: PhysGraph, field) -> Tensor:
    field = field if isinstance(field, Tensor) else Tensor(field)
    dz = pg.coords[pg.receivers] - pg.coords[pg.senders]
    dist = np.linalg.norm(dz, axis=1, keepdims=True)
    df = ad.sub(ad.gather_rows(field, pg.receivers), ad.gather_rows(field, pg.senders))
    return ad.concat([Tensor(dz), Tensor(dist), df], axis=1)


def encode(pg: PhysGraph, field, params: Params) -> Tuple[Tensor, Tensor]:
    """Node latents (n_nodes, d) and edge latents (n_edges, d)"""
    x = mlp(node_features(pg, field), params, "encoder.node")
    e = mlp(edge_features(pg, field), params, "encoder.edge")
    return x, e


def cell_mean(e: Tensor, pg: PhysGraph) -> Tensor:
    """c_i = mean of the four directed counterclockwise edges of cell i"""
    cell_of_edge = np.repeat(np.arange(pg.n_cells), 4)
    total = ad.scatter_add_rows(ad.gather_rows(e, pg.cell_edges.reshape(-1)), cell_of_edge, pg.n_cells)
    return ad.scale(total, 0.25)


def node_mean(c: Tensor, pg: PhysGraph) -> Tensor:
    """Mean over the N_c cells that contain each node"""
    corner_cell = np.repeat(np.arange(pg.n_cells), 4)
    total = ad.scatter_add_rows(ad.gather_rows(c, corner_cell), pg.cells.reshape(-1), pg.n_nodes)
    inv = 1.0 / np.maximum(pg.cells_per_node, 1)
    return ad.scale(total, np.broadcast_to(inv[:, None], total.shape))


def process_block(x: Tensor, e: Tensor, pg: PhysGraph, params: Params, k: int) -> Tuple[Tensor, Tensor]:
    prefix = f"processor.{k}"
    edge_in = ad.concat([e, ad.gather_rows(x, pg.receivers), ad.gather_rows(x, pg.senders)], axis=1)
    e_new = mlp(edge_in, params, f"{prefix}.edge")
    cells = cell_mean(e_new, pg)
    x_new = mlp(ad.concat([x, node_mean(cells, pg)], axis=1), params, f"{prefix}.node")
    return ad.add(x_new, x), ad.add(e_new, e)


def decode(x: Tensor, params: Params) -> Tensor:
    """(n_nodes, 3) next-iteration (u, v, p); no LayerNorm"""
    return mlp(x, params, "decoder", layernorm=False)


def forward(pg: PhysGraph, field, params: Params, config: Optional[GNConfig] = None) -> Tensor:
    config = config or GNConfig()
    x, e = encode(pg, field, params)
    for k in range(config.depth):
        x, e = process_block(x, e, pg, params, k)
    return decode(x, params)


def rollout(
    model: GNModel,
    pg: PhysGraph,
    mask: np.ndarray,
    values: np.ndarray,
    iterations: int,
    field0: Optional[np.ndarray] = None,
) -> FlowField:
    """Autoregressive inference from the zero field, imposing the Dirichlet data each iteration"""
    field = np.zeros((pg.n_nodes, 3)) if field0 is None else np.array(field0, dtype=np.float64)
    field = apply_dirichlet(field, mask, values)
    for t in range(iterations):
        field = apply_dirichlet(model(pg, field).data, mask, values)
        if not np.all(np.isfinite(field)):
            logger.warning(f"Rollout produced non-finite values at iteration {t + 1}")
            break
    return FlowField(field)


# ==============================================================================
# Checkpoints


def checkpoint_bytes(model: GNModel) -> bytes:
    header = json.dumps(
        {
            "config": model.config.model_dump(),
            "params": [[name, list(p.shape)] for name, p in model.params.items()],
        },
        sort_keys=True,
    ).encode()
    return (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header))
        + header
        + model.flat().astype("<f8").tobytes()
    )


def save_checkpoint(model: GNModel, path: Union[str, Path]) -> Path:
    return write_file(path, checkpoint_bytes(model))


def _parse_checkpoint(payload: bytes) -> GNModel:
    """Model from checkpoint bytes; ValueError naming the first defect"""
    head = len(CHECKPOINT_MAGIC)
    if payload[:head] != CHECKPOINT_MAGIC or len(payload) < head + 8:
        raise ValueError("not a checkpoint")
    version, header_len = struct.unpack("<II", payload[head : head + 8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(payload[head + 8 : head + 8 + header_len])
        config = GNConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"corrupt checkpoint header ({str(e)})")

    expected = [[name, list(shape)] for name, shape in parameter_shapes(config)]
    if header.get("params") != expected:
        raise ValueError("parameter layout does not match its config")
    body = payload[head + 8 + header_len :]
    if len(body) % 8:
        raise ValueError("truncated parameter block")
    model = GNModel(config)
    try:
        model.load_flat(np.frombuffer(body, dtype="<f8").astype(np.float64))
    except ConfigurationError as e:
        raise ValueError(str(e))
    return model


def load_checkpoint(path: Union[str, Path]) -> GNModel:
    """
    Raises:
        StorageError: unreadable file, wrong magic or version, or a size mismatch
    """
    path = Path(path)
    try:
        model = _parse_checkpoint(path.read_bytes())
    except OSError as e:
        error_msg = f"Cannot read checkpoint {path}: {str(e)}"
        logger.error(error_msg)
        raise StorageError(error_msg)
    except ValueError as e:
        error_msg = f"{path}: {str(e)}"
        logger.error(error_msg)
        raise StorageError(error_msg)
    logger.info(f"Loaded checkpoint {path}: {model.n_params} parameters")
    return model
