"""
Manufactured solutions for measuring truncation error.

The analytic field u = sin(pi x) cos(pi y), v = -cos(pi x) sin(pi y),
p = sin(pi x) sin(pi y) is divergence free; substituting it into the
discrete residual on a curved block and comparing R / J_inv with the
analytic forcing gives the truncation error of the whole GC-FDM chain.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from gcfdm.graph import ETA, MISSING, XI, CompGraph, build_graphs
from gcfdm.mesh import Block, BoundaryPatch, MultiBlockMesh, PatchKind, Side
from gcfdm.metrics import MetricField, compute_metrics
from gcfdm.residual import assemble_residuals_gc, central_difference

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (17, 33, 65)
WARP_X = 0.1
WARP_Y = 0.05


def curved_mapping(s: np.ndarray, t: np.ndarray):
    """(x, y) and the analytic derivatives x_s, x_t, y_s, y_t of the test mapping"""
    x = s + WARP_X * np.sin(np.pi * t)
    y = t + WARP_Y * np.sin(np.pi * s)
    x_s, x_t = np.ones_like(s), WARP_X * np.pi * np.cos(np.pi * t)
    y_s, y_t = WARP_Y * np.pi * np.cos(np.pi * s), np.ones_like(t)
    return x, y, x_s, x_t, y_s, y_t


def curved_block_mesh(n: int) -> MultiBlockMesh:
    """Single smoothly warped n x n block with walls on every side"""
    s, t = np.meshgrid(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, n), indexing="ij")
    x, y, *_ = curved_mapping(s, t)
    boundaries = tuple(BoundaryPatch(block=0, side=side, kind=PatchKind.WALL) for side in Side)
    return MultiBlockMesh((Block(np.stack([x, y], axis=-1)),), (), boundaries)


def manufactured_solution(coords: np.ndarray) -> np.ndarray:
    x, y = coords[:, 0], coords[:, 1]
    sx, cx = np.sin(np.pi * x), np.cos(np.pi * x)
    sy, cy = np.sin(np.pi * y), np.cos(np.pi * y)
    return np.stack([sx * cy, -cx * sy, sx * sy], axis=1)


def manufactured_source(coords: np.ndarray, re: float) -> np.ndarray:
    """
    Analytic (continuity, x-momentum, y-momentum) forcing of the conservative
    equations for ``manufactured_solution``.
    """
    x, y = coords[:, 0], coords[:, 1]
    pi = np.pi
    sx, cx = np.sin(pi * x), np.cos(pi * x)
    sy, cy = np.sin(pi * y), np.cos(pi * y)
    u, v = sx * cy, -cx * sy
    u_x, u_y = pi * cx * cy, -pi * sx * sy
    v_x, v_y = pi * sx * sy, -pi * cx * cy
    p_x, p_y = pi * cx * sy, pi * sx * cy
    visc = 2.0 * pi**2 / re
    s_x = 2.0 * u * u_x + u_y * v + u * v_y + p_x + visc * u
    s_y = u_x * v + u * v_x + 2.0 * v * v_y + p_y + visc * v
    return np.stack([np.zeros_like(x), s_x, s_y], axis=1)


def _depth_mask(mesh: MultiBlockMesh, depth: int) -> np.ndarray:
    block = mesh.blocks[0]
    i, j = np.meshgrid(np.arange(block.ni), np.arange(block.nj), indexing="xy")
    inner = (i >= depth) & (i < block.ni - depth) & (j >= depth) & (j < block.nj - depth)
    return inner.reshape(-1)


def observed_orders(spacings: Sequence[float], errors: Sequence[float]) -> List[float]:
    orders = []
    for (h0, e0), (h1, e1) in zip(zip(spacings[:-1], errors[:-1]), zip(spacings[1:], errors[1:])):
        orders.append(float(np.log(e0 / e1) / np.log(h0 / h1)) if e0 > 0 and e1 > 0 else float("nan"))
    return orders


@dataclass
class ConvergenceStudy:
    levels: List[int]
    errors: List[float]
    orders: List[float]

    def as_dict(self) -> Dict:
        return {"levels": self.levels, "errors": self.errors, "orders": self.orders}


def residual_error(n: int, re: float = 10.0, depth: int = 2) -> float:
    """max |R / J_inv - S| over nodes at least ``depth`` layers inside the block"""
    mesh = curved_block_mesh(n)
    _, cg = build_graphs(mesh)
    metrics = compute_metrics(mesh, cg)
    coords = mesh.physical_coords()
    R = assemble_residuals_gc(manufactured_solution(coords), metrics, cg, re)
    scaled = R.array() / metrics.J_inv[:, None]
    inner = _depth_mask(mesh, depth)
    return float(np.max(np.abs(scaled[inner] - manufactured_source(coords, re)[inner])))


def residual_convergence(levels: Sequence[int] = DEFAULT_LEVELS, re: float = 10.0) -> ConvergenceStudy:
    levels = list(levels)
    errors = [residual_error(n, re) for n in levels]
    orders = observed_orders([1.0 / (n - 1) for n in levels], errors)
    logger.info(f"Residual truncation error {errors} -> observed orders {orders}")
    return ConvergenceStudy(levels, errors, orders)


def metric_error(n: int) -> float:
    """Largest deviation of the index-space metrics, rescaled to unit spacing, from the analytic ones"""
    mesh = curved_block_mesh(n)
    _, cg = build_graphs(mesh)
    metrics = compute_metrics(mesh, cg)
    h = 1.0 / (n - 1)
    block = mesh.blocks[0]
    s, t = np.meshgrid(np.linspace(0.0, 1.0, block.ni), np.linspace(0.0, 1.0, block.nj), indexing="xy")
    _, _, x_s, x_t, y_s, y_t = curved_mapping(s.reshape(-1), t.reshape(-1))
    deviations = [
        metrics.x_xi / h - x_s,
        metrics.x_eta / h - x_t,
        metrics.y_xi / h - y_s,
        metrics.y_eta / h - y_t,
        metrics.J_inv / h**2 - (x_s * y_t - x_t * y_s),
    ]
    return float(max(np.max(np.abs(d)) for d in deviations))


def metric_convergence(levels: Sequence[int] = DEFAULT_LEVELS) -> ConvergenceStudy:
    levels = list(levels)
    errors = [metric_error(n) for n in levels]
    orders = observed_orders([1.0 / (n - 1) for n in levels], errors)
    logger.info(f"Metric error {errors} -> observed orders {orders}")
    return ConvergenceStudy(levels, errors, orders)


def freestream_commutator(metrics: MetricField, cg: CompGraph) -> Dict[str, float]:
    """
    Discrete metric identity D_xi(S_xi) + D_eta(S_eta), the continuity
    residual a uniform stream leaves behind. Reported, not enforced.
    """
    s_xi = np.stack(metrics.s_xi, axis=1)
    s_eta = np.stack(metrics.s_eta, axis=1)
    total = central_difference((s_xi, s_eta), XI, cg).data + central_difference((s_xi, s_eta), ETA, cg).data
    interior = (cg.minus != MISSING).all(axis=1) & (cg.plus != MISSING).all(axis=1)
    magnitude = np.max(np.abs(total), axis=1)
    return {
        "max": float(magnitude.max()) if magnitude.size else 0.0,
        "interior_max": float(magnitude[interior].max()) if interior.any() else 0.0,
    }
