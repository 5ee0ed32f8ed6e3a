"""
Grid metrics of the index-to-physical mapping on the computational graph.

Coordinate derivatives use the same halo-completed second-order stencil
as the residual engine (unit index spacing, one-sided at physical
boundaries), so a block split leaves interface metrics unchanged.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from gcfdm.errors import DegenerateMeshError
from gcfdm.graph import ETA, XI, CompGraph
from gcfdm.mesh import MultiBlockMesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Per G_com node metrics; constants for the differentiation engine"""

    x_xi: np.ndarray
    x_eta: np.ndarray
    y_xi: np.ndarray
    y_eta: np.ndarray
    xi_x: np.ndarray
    xi_y: np.ndarray
    eta_x: np.ndarray
    eta_y: np.ndarray
    J: np.ndarray
    J_inv: np.ndarray
    T11: np.ndarray
    T12: np.ndarray
    T22: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.J.shape[0])

    @property
    def s_xi(self) -> Tuple[np.ndarray, np.ndarray]:
        """(xi_x J_inv, xi_y J_inv), taken directly as (y_eta, -x_eta)"""
        return self.y_eta, -self.x_eta

    @property
    def s_eta(self) -> Tuple[np.ndarray, np.ndarray]:
        """(eta_x J_inv, eta_y J_inv) = (-y_xi, x_xi)"""
        return -self.y_xi, self.x_xi

    @classmethod
    def concatenate(cls, parts) -> "MetricField":
        names = cls.__dataclass_fields__.keys()
        return cls(**{name: np.concatenate([getattr(p, name) for p in parts]) for name in names})


def metrics_from_derivatives(x_xi, x_eta, y_xi, y_eta) -> MetricField:
    j_inv = x_xi * y_eta - x_eta * y_xi
    with np.errstate(divide="ignore"):
        j = 1.0 / j_inv
    xi_x, xi_y = j * y_eta, -j * x_eta
    eta_x, eta_y = -j * y_xi, j * x_xi
    return MetricField(
        x_xi=x_xi,
        x_eta=x_eta,
        y_xi=y_xi,
        y_eta=y_eta,
        xi_x=xi_x,
        xi_y=xi_y,
        eta_x=eta_x,
        eta_y=eta_y,
        J=j,
        J_inv=j_inv,
        T11=(xi_x**2 + xi_y**2) * j_inv,
        T12=(xi_x * eta_x + xi_y * eta_y) * j_inv,
        T22=(eta_x**2 + eta_y**2) * j_inv,
    )


def compute_metrics(mesh: MultiBlockMesh, graph: CompGraph) -> MetricField:
    """
    Metrics from second-order index-space differences of the node coordinates.

    Raises:
        DegenerateMeshError: some node has J_inv <= 0; the message names the
            block and (i, j) of the first one
    """
    xy = mesh.raw_coords()
    d_xi = graph.central_operator(XI).apply(xy, graph.n_nodes)
    d_eta = graph.central_operator(ETA).apply(xy, graph.n_nodes)
    field = metrics_from_derivatives(d_xi[:, 0], d_eta[:, 0], d_xi[:, 1], d_eta[:, 1])

    bad = np.flatnonzero(~(field.J_inv > 0.0))
    if bad.size:
        k = bad[0]
        b, (i, j) = int(graph.block_of[k]), graph.ij[k]
        error_msg = (
            f"Degenerate mapping at block {b} node ({i},{j}): J_inv = {field.J_inv[k]:.3e} "
            f"({bad.size} node(s) with J_inv <= 0)"
        )
        logger.error(error_msg)
        raise DegenerateMeshError(error_msg)
    logger.debug(f"Metrics on {graph.n_nodes} nodes: J_inv in [{field.J_inv.min():.3e}, {field.J_inv.max():.3e}]")
    return field


def covariant_velocity(velocity: np.ndarray, metrics: MetricField) -> Tuple[np.ndarray, np.ndarray]:
    """
    U = (u xi_x + v xi_y) J_inv and V = (u eta_x + v eta_y) J_inv.

    Args:
        velocity: (n, >=2) array on the same nodes as ``metrics``
    """
    u, v = velocity[:, 0], velocity[:, 1]
    sx, sy = metrics.s_xi
    ex, ey = metrics.s_eta
    return u * sx + v * sy, u * ex + v * ey
