"""
Flow conditions and hard Dirichlet boundary values.

A node's prescribed values come from the patch that decided its type:
walls are no-slip, a moving lid slides at the lid speed, an inlet carries
either a constant vector or the parabolic profile
u = 4 U (y - y0) (H - (y - y0)) / H^2. The pressure-anchor node fixes p = 0.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.errors import ConfigurationError
from gcfdm.mesh import MultiBlockMesh, PatchKind

logger = logging.getLogger(__name__)

KINEMATIC_VISCOSITY = 1e-3
CYLINDER_DIAMETER = 0.1


class FlowConditions(BaseModel):
    """
    Reynolds-number parameterization of one boundary-value problem.

    ``reynolds`` is the flow Reynolds number; ``viscous_re`` is the
    coefficient whose inverse multiplies the viscous fluxes.
    """

    model_config = ConfigDict(frozen=True)

    reynolds: float = Field(gt=0)
    viscous_re: float = Field(gt=0)
    lid_velocity: Optional[float] = None
    inlet_velocity: Optional[float] = None
    diameter: float = CYLINDER_DIAMETER

    @property
    def mean_velocity(self) -> Optional[float]:
        """U_mean = 2U/3 of the parabolic inlet profile"""
        if self.inlet_velocity is None:
            return None
        return 2.0 * self.inlet_velocity / 3.0

    @classmethod
    def cavity(cls, re: float, lid_velocity: float = 1.0) -> "FlowConditions":
        return cls(reynolds=re, viscous_re=re, lid_velocity=lid_velocity)

    @classmethod
    def channel(
        cls, re: float, viscosity: float = KINEMATIC_VISCOSITY, diameter: float = CYLINDER_DIAMETER
    ) -> "FlowConditions":
        """Re = U_mean D / nu at fixed viscosity; Re = 20 gives U = 0.3"""
        mean = re * viscosity / diameter
        return cls(reynolds=re, viscous_re=1.0 / viscosity, inlet_velocity=1.5 * mean, diameter=diameter)

    @classmethod
    def for_geometry(cls, geometry: str, re: float) -> "FlowConditions":
        if geometry == "cavity":
            return cls.cavity(re)
        if geometry in ("channel", "cylinder", "double_cylinder"):
            return cls.channel(re)
        raise ConfigurationError(f"Unknown geometry {geometry!r}")


def parabolic_profile(y: np.ndarray, U: float, height: float, y0: float = 0.0) -> np.ndarray:
    s = np.asarray(y, dtype=np.float64) - y0
    return 4.0 * U * s * (height - s) / height**2


def boundary_values(
    mesh: MultiBlockMesh, conditions: Optional[FlowConditions] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per physical node Dirichlet mask and prescribed values for (u, v, p).

    Lid and inlet speeds in ``conditions`` override the values stored in
    the patches.

    Returns:
        tuple: boolean mask (n, 3) and values (n, 3), zero where unmasked
    """
    n = mesh.n_nodes
    mask = np.zeros((n, 3), dtype=bool)
    values = np.zeros((n, 3), dtype=np.float64)
    coords = mesh.physical_coords()

    for k, patch in enumerate(mesh.node_patches()):
        if patch is None or patch.kind == PatchKind.OUTLET:
            continue
        mask[k, :2] = True
        data = patch.value
        if patch.kind == PatchKind.WALL:
            continue
        if patch.kind == PatchKind.MOVING_LID:
            lid = conditions.lid_velocity if conditions and conditions.lid_velocity is not None else None
            values[k, 0] = lid if lid is not None else (data.u if data else 1.0)
            values[k, 1] = data.v if data and lid is None else 0.0
            continue
        # inlet
        if data is not None and data.profile == "parabolic":
            U = conditions.inlet_velocity if conditions and conditions.inlet_velocity is not None else data.U
            values[k, 0] = parabolic_profile(coords[k, 1], U, data.height, data.y0)
        elif data is not None:
            values[k, 0], values[k, 1] = data.u, data.v

    anchor = mesh.anchor_node()
    if anchor is not None:
        mask[anchor, 2] = True
        values[anchor, 2] = 0.0
    logger.debug(f"Dirichlet data: {int(mask[:, 0].sum())} velocity node(s), {int(mask[:, 2].sum())} pressure node(s)")
    return mask, values


def apply_dirichlet(field: Union[Tensor, np.ndarray], mask: np.ndarray, values: np.ndarray):
    """Overwrite masked entries; free entries keep their value and gradient"""
    if isinstance(field, Tensor):
        keep = (~mask).astype(np.float64)
        return ad.shift(ad.scale(field, keep), np.where(mask, values, 0.0))
    return np.where(mask, values, np.asarray(field, dtype=np.float64))
