"""
Residuals of the steady incompressible Navier-Stokes equations in
transformed (xi, eta) coordinates, evaluated on the computational graph.

R = dE/dxi + dF/deta - dEv/dxi - dFv/deta, with the rows of each flux
ordered (continuity, x-momentum, y-momentum). Two evaluations exist:
``assemble_residuals_gc`` builds every difference as fixed-weight message
passing on tensors and is differentiable; ``assemble_residuals_loop`` walks
the same stencil tables node by node with plain floats and serves as the
reference.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.config import settings
from gcfdm.errors import ConfigurationError
from gcfdm.graph import ETA, MISSING, XI, CompGraph, DifferenceOperator, gather, scatter_average
from gcfdm.metrics import MetricField

logger = logging.getLogger(__name__)

Values = Union[Tensor, np.ndarray]
FluxPair = Tuple[Values, Values]

TERM_NAMES = ("L_cont", "L_momx", "L_momy", "L_p")


@dataclass(frozen=True, eq=False)
class FlowField:
    """(u, v, p) per physical node"""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != 3:
            raise ValueError(f"FlowField expects shape (n, 3), got {values.shape}")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, n: int) -> "FlowField":
        return cls(np.zeros((n, 3)))

    @property
    def u(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def v(self) -> np.ndarray:
        return self.values[:, 1]

    @property
    def p(self) -> np.ndarray:
        return self.values[:, 2]

    @property
    def velocity_magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True, eq=False)
class ResidualField:
    """
    Residuals projected to physical nodes.

    ``values`` holds (R_cont, R_mom_x, R_mom_y) per node and is exactly zero
    at Dirichlet nodes; ``outlet`` holds R_p for the physical outlet nodes
    listed in ``outlet_nodes``.
    """

    values: Values
    outlet: Values
    contributing: np.ndarray
    outlet_nodes: np.ndarray

    def _array(self, value: Values) -> np.ndarray:
        return value.data if isinstance(value, Tensor) else np.asarray(value)

    @property
    def cont(self) -> np.ndarray:
        return self._array(self.values)[:, 0]

    @property
    def mom_x(self) -> np.ndarray:
        return self._array(self.values)[:, 1]

    @property
    def mom_y(self) -> np.ndarray:
        return self._array(self.values)[:, 2]

    @property
    def r_p(self) -> np.ndarray:
        return self._array(self.outlet)

    def array(self) -> np.ndarray:
        return self._array(self.values)


def _to_tensor(value: Values) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _weights_for(w: np.ndarray, ndim: int) -> np.ndarray:
    return w.reshape((-1,) + (1,) * (ndim - 1))


def _apply(op: DifferenceOperator, values, n: int) -> Tensor:
    """Message passing of one operator over scalar data or a flux pair"""
    if isinstance(values, tuple):
        source = ad.concat([_to_tensor(values[0]), _to_tensor(values[1])], axis=0)
        rows, weight = op.flux_rows(n), op.weight * op.sign
    else:
        source = _to_tensor(values)
        rows, weight = op.src, op.weight
    messages = ad.gather_rows(source, rows)
    messages = ad.scale(messages, np.broadcast_to(_weights_for(weight, messages.ndim), messages.shape))
    return ad.scatter_add_rows(messages, op.dst, n)


def central_difference(values, direction: int, cg: CompGraph) -> Tensor:
    """
    (f[+1] - f[-1]) / 2 along ``direction`` with halo neighbours at
    interfaces and (-3 f0 + 4 f1 - f2) / 2 one-sided closures at physical
    boundaries.

    Args:
        values: (n, c) or (n,) node data, or a pair (E, F) of fluxes, in
            which case halo neighbours contribute their own-axis flux
        direction: ``XI`` or ``ETA``
    """
    return _apply(cg.central_operator(direction), values, cg.n_nodes)


def halfpoint_derivative(values, direction: int, cg: CompGraph) -> Tensor:
    """
    Two-pass difference: node-to-edge averages (f_nbr + f) / 2 stored on the
    stencil edges, then edge-to-node differences (+1 toward the plus
    neighbour, -1 toward the minus one). Nodes without a full stencil use
    the one-sided closure.
    """
    n = cg.n_nodes
    node, nbr, nbr_axis, nbr_sign, to_node, closure = cg.half_edges(direction)
    if isinstance(values, tuple):
        source = ad.concat([_to_tensor(values[0]), _to_tensor(values[1])], axis=0)
        self_rows, nbr_rows, sign = direction * n + node, nbr_axis * n + nbr, nbr_sign
    else:
        source = _to_tensor(values)
        self_rows, nbr_rows, sign = node, nbr, np.ones(node.size)

    far = ad.gather_rows(source, nbr_rows)
    far = ad.scale(far, np.broadcast_to(_weights_for(sign, far.ndim), far.shape))
    half = ad.scale(ad.add(far, ad.gather_rows(source, self_rows)), 0.5)
    half = ad.scale(half, np.broadcast_to(_weights_for(to_node, half.ndim), half.shape))
    interior = ad.scatter_add_rows(half, node, n)
    return ad.add(interior, _apply(closure, values, n))


def _columns(x_com: Values) -> Tuple[Tensor, Tensor, Tensor]:
    x = _to_tensor(x_com)
    return ad.column(x, 0), ad.column(x, 1), ad.column(x, 2)


def inviscid_flux(field: Values, metrics: MetricField, cg: Optional[CompGraph] = None) -> Tuple[Tensor, Tensor]:
    """
    E = [U; uU + p xi_x J_inv; vU + p xi_y J_inv] and F likewise with V and
    the eta metrics.

    Args:
        field: (n_com, 3) values gathered onto G_com
    """
    u, v, p = _columns(field)
    sx, sy = metrics.s_xi
    ex, ey = metrics.s_eta
    U = ad.add(ad.scale(u, sx), ad.scale(v, sy))
    V = ad.add(ad.scale(u, ex), ad.scale(v, ey))
    E = ad.stack_columns([U, ad.add(ad.mul(u, U), ad.scale(p, sx)), ad.add(ad.mul(v, U), ad.scale(p, sy))])
    F = ad.stack_columns([V, ad.add(ad.mul(u, V), ad.scale(p, ex)), ad.add(ad.mul(v, V), ad.scale(p, ey))])
    return E, F


Reynolds = Union[float, np.ndarray]


def _check_re(re: Reynolds) -> None:
    if not np.all(np.asarray(re) > 0):
        error_msg = f"Reynolds number must be positive, got {re}"
        logger.error(error_msg)
        raise ConfigurationError(error_msg)


def inverse_re(re: Reynolds, n: int) -> np.ndarray:
    """1/Re per G_com node; batches carry one Re per member graph"""
    _check_re(re)
    return np.broadcast_to(1.0 / np.asarray(re, dtype=np.float64), (n,))


def velocity_gradients(field: Values, cg: CompGraph) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """(u_xi, u_eta, v_xi, v_eta) at every G_com node"""
    u, v, _ = _columns(field)
    return (
        central_difference(u, XI, cg),
        central_difference(u, ETA, cg),
        central_difference(v, XI, cg),
        central_difference(v, ETA, cg),
    )


def viscous_flux(field: Values, metrics: MetricField, cg: CompGraph, re: Reynolds) -> Tuple[Tensor, Tensor]:
    """
    Ev = (1/Re)[0; T11 u_xi + T12 u_eta; T11 v_xi + T12 v_eta],
    Fv = (1/Re)[0; T12 u_xi + T22 u_eta; T12 v_xi + T22 v_eta].

    Raises:
        ConfigurationError: Re <= 0
    """
    k = inverse_re(re, cg.n_nodes)
    u_xi, u_eta, v_xi, v_eta = velocity_gradients(field, cg)
    zero = Tensor(np.zeros(cg.n_nodes))
    Ev = ad.stack_columns(
        [
            zero,
            ad.add(ad.scale(u_xi, k * metrics.T11), ad.scale(u_eta, k * metrics.T12)),
            ad.add(ad.scale(v_xi, k * metrics.T11), ad.scale(v_eta, k * metrics.T12)),
        ]
    )
    Fv = ad.stack_columns(
        [
            zero,
            ad.add(ad.scale(u_xi, k * metrics.T12), ad.scale(u_eta, k * metrics.T22)),
            ad.add(ad.scale(v_xi, k * metrics.T12), ad.scale(v_eta, k * metrics.T22)),
        ]
    )
    return Ev, Fv


def _normal_factors(metrics: MetricField, cg: CompGraph, nodes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """n . grad(xi) and n . grad(eta) at the given G_com nodes"""
    nx, ny = cg.normal[nodes, 0], cg.normal[nodes, 1]
    c_xi = nx * metrics.xi_x[nodes] + ny * metrics.xi_y[nodes]
    c_eta = nx * metrics.eta_x[nodes] + ny * metrics.eta_y[nodes]
    return c_xi, c_eta


def _outlet_layout(cg: CompGraph) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    com = np.flatnonzero(cg.outlet)
    phys, slot = np.unique(cg.index_block[com], return_inverse=True)
    counts = np.bincount(slot, minlength=phys.size).astype(np.float64)
    return com, phys, slot, counts


def neumann_outlet_residual(field: Values, metrics: MetricField, cg: CompGraph, re: Reynolds) -> Tuple[Tensor, np.ndarray]:
    """
    R_p = (1/Re) d(u, v)/dn - p n on every outlet node.

    The normal derivative combines the node's index derivatives, which are
    one-sided along the inward direction, through the metrics.

    Args:
        field: (n_com, 3) values gathered onto G_com

    Returns:
        tuple: R_p of shape (n_outlet, 2) averaged over block copies, and the
            physical indices of the outlet nodes
    """
    _check_re(re)
    com, phys, slot, counts = _outlet_layout(cg)
    if com.size == 0:
        return Tensor(np.zeros((0, 2))), phys
    u_xi, u_eta, v_xi, v_eta = (ad.gather_rows(d, com) for d in velocity_gradients(field, cg))
    p = ad.gather_rows(ad.column(_to_tensor(field), 2), com)
    c_xi, c_eta = _normal_factors(metrics, cg, com)
    k = inverse_re(re, cg.n_nodes)[com]
    normal = cg.normal[com]
    r_u = ad.sub(ad.add(ad.scale(u_xi, k * c_xi), ad.scale(u_eta, k * c_eta)), ad.scale(p, normal[:, 0]))
    r_v = ad.sub(ad.add(ad.scale(v_xi, k * c_xi), ad.scale(v_eta, k * c_eta)), ad.scale(p, normal[:, 1]))
    r_com = ad.stack_columns([r_u, r_v])
    total = ad.scatter_add_rows(r_com, slot, phys.size)
    return ad.scale(total, np.broadcast_to((1.0 / counts)[:, None], total.shape)), phys


def _contributing(cg: CompGraph) -> np.ndarray:
    dirichlet_phys = np.zeros(cg.n_phys, dtype=bool)
    dirichlet_phys[cg.index_block[cg.dirichlet]] = True
    return ~dirichlet_phys


def assemble_residuals_gc(field: Values, metrics: MetricField, cg: CompGraph, re: Reynolds) -> ResidualField:
    """
    Residuals as message passing: [-1/2, 1/2] node-to-node weights for the
    inviscid fluxes, [1/2, 1/2] node-to-edge then [-1, 1] edge-to-node for
    the viscous fluxes. Dirichlet nodes are zeroed, then block copies are
    averaged onto physical nodes.

    Args:
        field: (n_phys, 3) physical-node values; a Tensor keeps the result
            differentiable with respect to it
    """
    _check_re(re)
    x_com = gather(_to_tensor(field), cg)
    E, F = inviscid_flux(x_com, metrics, cg)
    Ev, Fv = viscous_flux(x_com, metrics, cg, re)
    dE = central_difference((E, F), XI, cg)
    dF = central_difference((E, F), ETA, cg)
    dEv = halfpoint_derivative((Ev, Fv), XI, cg)
    dFv = halfpoint_derivative((Ev, Fv), ETA, cg)
    r_com = ad.sub(ad.add(dE, dF), ad.add(dEv, dFv))
    keep = (~cg.dirichlet).astype(np.float64)
    r_com = ad.scale(r_com, np.broadcast_to(keep[:, None], r_com.shape))
    r_p, outlet_nodes = neumann_outlet_residual(x_com, metrics, cg, re)
    return ResidualField(
        values=scatter_average(r_com, cg),
        outlet=r_p,
        contributing=_contributing(cg),
        outlet_nodes=outlet_nodes,
    )


# ==============================================================================
# Loop reference


def _loop_derivative(read, k: int, d: int, cg: CompGraph, halfpoint: bool = False) -> np.ndarray:
    """
    Derivative at node k along d; ``read(node, axis, sign)`` returns the
    value seen from k at a neighbour, already in k's frame.
    """
    m, p = cg.minus[k, d], cg.plus[k, d]
    if m != MISSING and p != MISSING:
        f_plus = read(p, cg.plus_axis[k, d], cg.plus_sign[k, d])
        f_minus = read(m, cg.minus_axis[k, d], cg.minus_sign[k, d])
        if halfpoint:
            center = read(k, d, 1.0)
            return 0.5 * (f_plus + center) - 0.5 * (f_minus + center)
        return 0.5 * (f_plus - f_minus)
    if m == MISSING:
        p1 = cg.plus[k, d]
        p2 = cg.plus[p1, d]
        return 0.5 * (-3.0 * read(k, d, 1.0) + 4.0 * read(p1, d, 1.0) - read(p2, d, 1.0))
    m1 = cg.minus[k, d]
    m2 = cg.minus[m1, d]
    return 0.5 * (3.0 * read(k, d, 1.0) - 4.0 * read(m1, d, 1.0) + read(m2, d, 1.0))


def assemble_residuals_loop(field: np.ndarray, metrics: MetricField, cg: CompGraph, re: Reynolds) -> ResidualField:
    """Reference evaluation with explicit per-node loops over the stencil tables"""
    field = field.data if isinstance(field, Tensor) else np.asarray(field, dtype=np.float64)
    n = cg.n_nodes
    inv_re = inverse_re(re, n)
    x = field[cg.index_block]
    sx, sy = metrics.s_xi
    ex, ey = metrics.s_eta

    fluxes = np.zeros((2, n, 3))
    for k in range(n):
        u, v, p = x[k]
        U = u * sx[k] + v * sy[k]
        V = u * ex[k] + v * ey[k]
        fluxes[0, k] = (U, u * U + p * sx[k], v * U + p * sy[k])
        fluxes[1, k] = (V, u * V + p * ex[k], v * V + p * ey[k])

    def scalar(column):
        return lambda node, axis, sign: x[node, column]

    grads = np.zeros((n, 4))
    for k in range(n):
        grads[k] = (
            _loop_derivative(scalar(0), k, XI, cg),
            _loop_derivative(scalar(0), k, ETA, cg),
            _loop_derivative(scalar(1), k, XI, cg),
            _loop_derivative(scalar(1), k, ETA, cg),
        )

    viscous = np.zeros((2, n, 3))
    for k in range(n):
        u_xi, u_eta, v_xi, v_eta = grads[k]
        t11, t12, t22 = metrics.T11[k], metrics.T12[k], metrics.T22[k]
        viscous[0, k] = (0.0, (t11 * u_xi + t12 * u_eta) * inv_re[k], (t11 * v_xi + t12 * v_eta) * inv_re[k])
        viscous[1, k] = (0.0, (t12 * u_xi + t22 * u_eta) * inv_re[k], (t12 * v_xi + t22 * v_eta) * inv_re[k])

    def flux_reader(table):
        return lambda node, axis, sign: sign * table[axis, node]

    r_com = np.zeros((n, 3))
    for k in range(n):
        if cg.dirichlet[k]:
            continue
        r_com[k] = (
            _loop_derivative(flux_reader(fluxes), k, XI, cg)
            + _loop_derivative(flux_reader(fluxes), k, ETA, cg)
            - _loop_derivative(flux_reader(viscous), k, XI, cg, halfpoint=True)
            - _loop_derivative(flux_reader(viscous), k, ETA, cg, halfpoint=True)
        )

    com, phys, slot, counts = _outlet_layout(cg)
    r_p = np.zeros((phys.size, 2))
    for position, k in enumerate(com):
        c_xi, c_eta = _normal_factors(metrics, cg, np.array([k]))
        u_xi, u_eta, v_xi, v_eta = grads[k]
        r = np.array(
            [
                (c_xi[0] * u_xi + c_eta[0] * u_eta) * inv_re[k] - x[k, 2] * cg.normal[k, 0],
                (c_xi[0] * v_xi + c_eta[0] * v_eta) * inv_re[k] - x[k, 2] * cg.normal[k, 1],
            ]
        )
        r_p[slot[position]] += r / counts[slot[position]]

    return ResidualField(
        values=scatter_average(r_com, cg),
        outlet=r_p,
        contributing=_contributing(cg),
        outlet_nodes=phys,
    )


# ==============================================================================
# Loss


def _mse(values: Values, rows: Optional[np.ndarray] = None) -> Tensor:
    t = _to_tensor(values)
    if rows is not None:
        t = ad.gather_rows(t, rows)
    if t.size == 0:
        return Tensor(0.0)
    return ad.scale(ad.sum_of_squares(t), 1.0 / t.size)


def loss_terms(R: ResidualField) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Mean squares of R_cont, R_mom_x, R_mom_y over contributing nodes, and of R_p"""
    values = _to_tensor(R.values)
    rows = np.flatnonzero(R.contributing)
    return (
        _mse(ad.column(values, 0), rows),
        _mse(ad.column(values, 1), rows),
        _mse(ad.column(values, 2), rows),
        _mse(R.outlet),
    )


def loss(R: ResidualField, weights: Optional[Sequence[float]] = None) -> Tensor:
    """
    alpha mse(R_cont) + beta mse(R_mom_x) + lambda mse(R_mom_y) + zeta mse(R_p)

    Args:
        weights: (alpha, beta, lambda, zeta); defaults to ``settings.LOSS_WEIGHTS``
    """
    weights = tuple(settings.LOSS_WEIGHTS if weights is None else weights)
    if len(weights) != 4:
        raise ConfigurationError(f"Expected 4 loss weights, got {len(weights)}")
    total = None
    for w, term in zip(weights, loss_terms(R)):
        weighted = ad.scale(term, w)
        total = weighted if total is None else ad.add(total, weighted)
    return total


def loss_components(R: ResidualField) -> Dict[str, float]:
    return {name: term.item() for name, term in zip(TERM_NAMES, loss_terms(R))}


def residual_loss(
    field: Values, metrics: MetricField, cg: CompGraph, re: Reynolds, weights: Optional[Sequence[float]] = None
) -> Tuple[Tensor, ResidualField]:
    R = assemble_residuals_gc(field, metrics, cg, re)
    return loss(R, weights), R
