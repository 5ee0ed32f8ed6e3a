"""
Steady solvers that drive the GC-FDM residual to zero without a network.

``direct_solve`` treats the nodal (u, v, p) as the unknowns and minimizes
the residual loss, either with adaptive-moment descent under warm-restart
learning rates or with L-BFGS-B from scipy on the same gradients.
``pseudo_time_solve`` marches du/dtau = -R_mom/J_inv and
dp/dtau = -beta R_cont/J_inv with a four-stage Runge-Kutta scheme and
local time steps until the update stalls.

The central stencils leave odd-even modes that no residual sees, and
pressure on velocity walls has no equation of its own. The solvers
therefore add a fourth-difference dissipation to the residuals and close
wall pressure by linear extrapolation from the interior; both vanish for
fields linear in pressure and quadratic in velocity. The residual module
itself stays free of either.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import minimize

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.boundary import FlowConditions, apply_dirichlet, boundary_values
from gcfdm.errors import NonFiniteError
from gcfdm.graph import ETA, MISSING, XI, CompGraph, PhysGraph, build_graphs, gather, scatter_average
from gcfdm.mesh import MultiBlockMesh
from gcfdm.metrics import MetricField, compute_metrics
from gcfdm.optim import AdamW, WarmRestarts
from gcfdm.residual import (
    FlowField,
    ResidualField,
    TERM_NAMES,
    assemble_residuals_gc,
    loss,
    loss_terms,
)

logger = logging.getLogger(__name__)

ARTIFICIAL_COMPRESSIBILITY = 1.0
DIVERGENCE_FACTOR = 10.0
DISSIPATION = 1.0 / 32.0
RK_STAGES = (0.25, 1.0 / 3.0, 0.5, 1.0)

Values = Union[Tensor, np.ndarray]


class SolverConfig(BaseModel):
    method: Literal["adamw", "lbfgs"] = "adamw"
    tol: float = Field(default=1e-12, gt=0)
    max_iters: int = Field(default=20000, gt=0)
    lr: float = Field(default=1e-2, gt=0)
    lr_min: float = Field(default=1e-5, ge=0)
    restart_period: int = Field(default=500, gt=0)
    loss_weights: Optional[Tuple[float, float, float, float]] = None
    log_every: int = Field(default=1000, gt=0)
    dissipation: float = Field(default=DISSIPATION, ge=0)

    # pseudo-time marching; a fixed dt replaces the local CFL steps
    cfl: float = Field(default=0.5, gt=0)
    dt: Optional[float] = Field(default=None, gt=0)
    steps: int = Field(default=50000, gt=0)
    steady_tol: float = Field(default=1e-10, gt=0)


@dataclass(frozen=True, eq=False)
class Stabilization:
    """
    Solver-side terms on top of the GC-FDM residual.

    ``coefficient`` scales the fourth difference L(L q) per physical node,
    where L is the graph Laplacian over ``senders``/``receivers``; it is
    zero wherever the node or a neighbour is not a regular four-edge node.
    ``wall_nodes`` get p = 2 p[first] - p[second] from the interior.
    """

    senders: np.ndarray
    receivers: np.ndarray
    coefficient: np.ndarray
    wall_nodes: np.ndarray
    first: np.ndarray
    second: np.ndarray
    reference_speed: float

    @property
    def n_nodes(self) -> int:
        return int(self.coefficient.shape[0])

    def _laplacian(self, q: Tensor) -> Tensor:
        diff = ad.sub(ad.gather_rows(q, self.senders), ad.gather_rows(q, self.receivers))
        return ad.scatter_add_rows(diff, self.receivers, self.n_nodes)

    def dissipation(self, field: Values) -> Tensor:
        """kappa L(L q) with q = (p / beta, u, v), matching the residual columns"""
        x = field if isinstance(field, Tensor) else Tensor(field)
        q = ad.stack_columns(
            [ad.scale(ad.column(x, 2), 1.0 / ARTIFICIAL_COMPRESSIBILITY), ad.column(x, 0), ad.column(x, 1)]
        )
        smooth = self._laplacian(self._laplacian(q))
        return ad.scale(smooth, np.broadcast_to(self.coefficient[:, None], smooth.shape))

    def extrapolate(self, field: Values) -> Values:
        """Wall pressure from the two nearest interior nodes along the inward grid line"""
        if self.wall_nodes.size == 0:
            return field
        if not isinstance(field, Tensor):
            out = np.array(field, dtype=np.float64)
            out[self.wall_nodes, 2] = 2.0 * out[self.first, 2] - out[self.second, 2]
            return out
        first = np.arange(self.n_nodes)
        second = np.arange(self.n_nodes)
        first[self.wall_nodes] = self.first
        second[self.wall_nodes] = self.second
        closed = np.zeros((self.n_nodes, 3))
        closed[self.wall_nodes, 2] = 1.0
        line = ad.sub(ad.scale(ad.gather_rows(field, first), 2.0), ad.gather_rows(field, second))
        return ad.add(ad.scale(field, 1.0 - closed), ad.scale(line, closed))

    @property
    def fixed(self) -> np.ndarray:
        """(n, 3) mask of the entries the closure overwrites"""
        mask = np.zeros((self.n_nodes, 3), dtype=bool)
        mask[self.wall_nodes, 2] = True
        return mask


def _inward_line(cg: CompGraph, k: int) -> Optional[Tuple[int, int]]:
    """
    The two G_com nodes inward of boundary node ``k``: along the index
    direction whose neighbour is missing, or along the diagonal at a corner.
    """
    steps = []
    for d in (XI, ETA):
        if cg.minus[k, d] == MISSING:
            steps.append((cg.plus, d))
        elif cg.plus[k, d] == MISSING:
            steps.append((cg.minus, d))
    if not steps:
        return None

    def advance(node: int) -> int:
        for table, d in steps:
            if node == MISSING:
                return MISSING
            node = int(table[node, d])
        return node

    first = advance(k)
    second = advance(first) if first != MISSING else MISSING
    if second == MISSING:
        return None
    return first, second


def build_stabilization(
    pg: PhysGraph, cg: CompGraph, metrics: MetricField, mask: np.ndarray, values: np.ndarray, strength: float
) -> Stabilization:
    n = pg.n_nodes
    degree = np.bincount(pg.receivers, minlength=n)
    irregular = (degree != 4).astype(np.float64)
    touches_irregular = np.bincount(pg.receivers, weights=irregular[pg.senders], minlength=n) > 0
    regular = (degree == 4) & ~touches_irregular & ~mask[:, 0]

    speeds = np.hypot(values[mask[:, 0], 0], values[mask[:, 0], 1])
    reference = float(speeds.max()) if speeds.size and speeds.max() > 0 else 1.0
    wave = reference + np.sqrt(reference**2 + ARTIFICIAL_COMPRESSIBILITY)
    spacing = np.sqrt(np.abs(scatter_average(metrics.J_inv, cg)))
    coefficient = np.where(regular, strength * wave * spacing, 0.0)

    order = np.argsort(cg.index_block, kind="stable")
    first_copy = order[np.searchsorted(cg.index_block[order], np.arange(n))]
    wall_nodes, first, second = [], [], []
    for node in np.flatnonzero(mask[:, 0] & ~mask[:, 2]):
        line = _inward_line(cg, int(first_copy[node]))
        if line is None:
            continue
        wall_nodes.append(node)
        first.append(cg.index_block[line[0]])
        second.append(cg.index_block[line[1]])
    logger.debug(
        f"Stabilization: {int(regular.sum())} dissipative node(s), {len(wall_nodes)} extrapolated wall pressure(s)"
    )
    return Stabilization(
        senders=pg.senders,
        receivers=pg.receivers,
        coefficient=coefficient,
        wall_nodes=np.asarray(wall_nodes, dtype=np.int64),
        first=np.asarray(first, dtype=np.int64),
        second=np.asarray(second, dtype=np.int64),
        reference_speed=reference,
    )


@dataclass(eq=False)
class Problem:
    """Everything a solver needs about one boundary-value problem"""

    mesh: MultiBlockMesh
    conditions: FlowConditions
    cg: CompGraph
    metrics: MetricField
    mask: np.ndarray
    values: np.ndarray
    stabilization: Stabilization

    @property
    def re(self) -> float:
        return self.conditions.viscous_re

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def fixed(self) -> np.ndarray:
        """Entries no solver updates: Dirichlet data and extrapolated wall pressure"""
        return self.mask | self.stabilization.fixed

    def clamp(self, field):
        return self.stabilization.extrapolate(apply_dirichlet(field, self.mask, self.values))

    def residuals(self, field) -> ResidualField:
        R = assemble_residuals_gc(field, self.metrics, self.cg, self.re)
        if not np.any(self.stabilization.coefficient):
            return R
        return replace(R, values=ad.add(R.values, self.stabilization.dissipation(field)))


def build_problem(mesh: MultiBlockMesh, conditions: FlowConditions, dissipation: float = DISSIPATION) -> Problem:
    pg, cg = build_graphs(mesh)
    mask, values = boundary_values(mesh, conditions)
    metrics = compute_metrics(mesh, cg)
    stabilization = build_stabilization(pg, cg, metrics, mask, values, dissipation)
    return Problem(mesh, conditions, cg, metrics, mask, values, stabilization)


@dataclass
class SolveReport:
    method: str
    converged: bool
    iterations: int
    final_loss: float
    best_loss: float
    initial_loss: float
    diverged: bool = False
    residual_norms: Dict[str, float] = field(default_factory=dict)
    history: List[float] = field(default_factory=list, repr=False)

    def as_dict(self) -> Dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "iterations": self.iterations,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "best_loss": self.best_loss,
            "diverged": self.diverged,
            "residual_norms": self.residual_norms,
        }


@dataclass
class DivergenceGuard:
    """
    Divergence test for descent under warm restarts.

    Before the first restart any loss above ``factor`` times the best one
    trips the guard. A restart raises the learning rate and the loss with
    it, so afterwards only the loss at the end of each cycle is compared,
    against the best loss seen before that cycle began. Non-finite losses
    always trip it.
    """

    schedule: WarmRestarts
    factor: float = DIVERGENCE_FACTOR
    best: float = np.inf
    baseline: float = np.inf
    restarted: bool = False

    def __call__(self, iteration: int, value: float) -> bool:
        if not np.isfinite(value):
            return True
        if iteration > 0 and self.schedule.is_restart(iteration):
            self.restarted = True
            self.baseline = self.best
        if self.restarted:
            tripped = self.schedule.is_restart(iteration + 1) and value > self.factor * self.baseline
        else:
            tripped = value > self.factor * self.best
        self.best = min(self.best, value)
        return tripped


def residual_norms(R: ResidualField) -> Dict[str, float]:
    """Max-abs and RMS of each equation's residual over contributing nodes"""
    rows = R.contributing
    norms: Dict[str, float] = {}
    for name, values in (("cont", R.cont[rows]), ("mom_x", R.mom_x[rows]), ("mom_y", R.mom_y[rows]), ("outlet", R.r_p)):
        values = np.asarray(values).reshape(-1)
        norms[f"{name}_max"] = float(np.max(np.abs(values))) if values.size else 0.0
        norms[f"{name}_rms"] = float(np.sqrt(np.mean(values**2))) if values.size else 0.0
    return norms


def _loss_and_grad(problem: Problem, field: np.ndarray, weights) -> Tuple[float, np.ndarray]:
    unknowns = Tensor(field, requires_grad=True)
    with ad.Tape() as tape:
        total = loss(problem.residuals(problem.clamp(unknowns)), weights)
    value = total.item()
    if not np.isfinite(value):
        return value, np.zeros_like(field)
    ad.backward(total, tape)
    return value, unknowns.grad


def _finish(problem: Problem, field: np.ndarray, report: SolveReport) -> Tuple[FlowField, SolveReport]:
    R = problem.residuals(field)
    report.residual_norms = residual_norms(R)
    report.residual_norms.update({name: term.item() for name, term in zip(TERM_NAMES, loss_terms(R))})
    logger.info(
        f"{report.method}: {'converged' if report.converged else 'stopped'} after {report.iterations} iterations, "
        f"loss {report.initial_loss:.3e} -> {report.final_loss:.3e}"
    )
    return FlowField(field), report


def _adamw(problem: Problem, field: np.ndarray, config: SolverConfig) -> Tuple[np.ndarray, SolveReport]:
    unknowns = Tensor(field, requires_grad=True)
    optimizer = AdamW([unknowns], lr=config.lr, weight_decay=0.0)
    schedule = WarmRestarts(config.lr, config.lr_min, config.restart_period)
    guard = DivergenceGuard(schedule)
    report = SolveReport("adamw", False, 0, np.inf, np.inf, np.inf)
    best = unknowns.data.copy()

    for it in range(config.max_iters):
        optimizer.zero_grad()
        optimizer.lr = schedule(it)
        with ad.Tape() as tape:
            total = loss(problem.residuals(problem.clamp(unknowns)), config.loss_weights)
        value = total.item()
        if it == 0:
            report.initial_loss = value
        report.history.append(value)
        report.iterations = it
        if guard(it, value):
            logger.warning(f"Direct solve diverging at iteration {it}: loss {value:.3e}, best {report.best_loss:.3e}")
            report.diverged = True
            break
        if value < report.best_loss:
            report.best_loss = value
            best = unknowns.data.copy()
        if value <= config.tol:
            report.converged = True
            break
        ad.backward(total, tape)
        optimizer.step()
        unknowns.data = problem.clamp(unknowns.data)
        if it % config.log_every == 0:
            logger.info(f"direct solve iteration {it}: loss {value:.4e} (lr {optimizer.lr:.2e})")
    else:
        report.iterations = config.max_iters

    report.final_loss = report.best_loss
    return best, report


def _lbfgs(problem: Problem, field: np.ndarray, config: SolverConfig) -> Tuple[np.ndarray, SolveReport]:
    free = ~problem.fixed
    base = field.copy()
    report = SolveReport("lbfgs", False, 0, np.inf, np.inf, np.inf)

    def objective(x: np.ndarray) -> Tuple[float, np.ndarray]:
        current = base.copy()
        current[free] = x
        value, grad = _loss_and_grad(problem, current, config.loss_weights)
        if not report.history:
            report.initial_loss = value
        report.history.append(value)
        return value, grad[free]

    result = minimize(
        objective,
        base[free],
        method="L-BFGS-B",
        jac=True,
        options={"maxiter": config.max_iters, "ftol": 0.0, "gtol": 0.0, "maxcor": 20},
    )
    best = base.copy()
    best[free] = result.x
    report.iterations = int(result.nit)
    report.final_loss = report.best_loss = float(result.fun)
    report.converged = report.final_loss <= config.tol
    report.diverged = not np.isfinite(report.final_loss)
    logger.debug(f"L-BFGS-B finished: {result.message}")
    return problem.clamp(best), report


def direct_solve(
    mesh: MultiBlockMesh,
    conditions: FlowConditions,
    config: Optional[SolverConfig] = None,
    field0: Optional[np.ndarray] = None,
) -> Tuple[FlowField, SolveReport]:
    """
    Minimize the residual loss over the nodal unknowns.

    Args:
        conditions: Reynolds number and boundary speeds of the problem
        field0: starting field, zero by default

    Returns:
        tuple: the best field found and its convergence report; a diverging
            run stops early with ``report.diverged`` set
    """
    config = config or SolverConfig()
    problem = build_problem(mesh, conditions, config.dissipation)
    start = np.zeros((problem.n_nodes, 3)) if field0 is None else np.array(field0, dtype=np.float64)
    start = problem.clamp(start)
    logger.info(f"Direct solve ({config.method}) on {problem.n_nodes} nodes at Re = {conditions.reynolds:g}")
    if config.method == "lbfgs":
        field, report = _lbfgs(problem, start, config)
    else:
        field, report = _adamw(problem, start, config)
    return _finish(problem, field, report)


def physical_inverse_jacobian(problem: Problem) -> np.ndarray:
    return scatter_average(problem.metrics.J_inv, problem.cg)


def outlet_pressure(field: np.ndarray, R: ResidualField, problem: Problem) -> np.ndarray:
    """
    Outlet pressure from the normal traction balance (1/Re) du/dn . n = p.

    R_p = (1/Re) du/dn - p n, so p + R_p . n is the balanced pressure.
    """
    nodes = R.outlet_nodes
    if nodes.size == 0:
        return field
    normal = scatter_average(problem.cg.normal, problem.cg)[nodes]
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    updated = field.copy()
    updated[nodes, 2] = field[nodes, 2] + np.sum(R.r_p * normal, axis=1)
    return updated


def local_time_step(problem: Problem, field: np.ndarray, config: SolverConfig) -> np.ndarray:
    """
    Pseudo-time step per physical node, shape (n, 1).

    cfl / lambda, where lambda adds the convective and artificial sound
    speeds along both index directions, the viscous limit and the
    dissipation's spectral radius. A fixed ``config.dt`` overrides it.
    """
    if config.dt is not None:
        return np.full((problem.n_nodes, 1), config.dt)
    m = problem.metrics
    x = gather(field, problem.cg)
    u, v = x[:, 0], x[:, 1]
    sound = np.sqrt(u**2 + v**2 + ARTIFICIAL_COMPRESSIBILITY)
    grad_xi = np.hypot(m.xi_x, m.xi_y)
    grad_eta = np.hypot(m.eta_x, m.eta_y)
    convective = (
        np.abs(u * m.xi_x + v * m.xi_y) + sound * grad_xi + np.abs(u * m.eta_x + v * m.eta_y) + sound * grad_eta
    )
    viscous = 4.0 * (grad_xi**2 + grad_eta**2) / problem.re
    radius = scatter_average(convective + viscous, problem.cg)
    radius += 64.0 * problem.stabilization.coefficient / physical_inverse_jacobian(problem)
    return (config.cfl / radius)[:, None]


def pseudo_time_solve(
    mesh: MultiBlockMesh,
    conditions: FlowConditions,
    config: Optional[SolverConfig] = None,
    field0: Optional[np.ndarray] = None,
) -> Tuple[FlowField, SolveReport]:
    """
    Explicit artificial-compressibility marching to the steady state.

    Every step runs four Runge-Kutta stages q = q0 + a dt rhs(q) with
    a = 1/4, 1/3, 1/2, 1, clamping the boundary data and balancing the
    outlet pressure after each stage. Stops when the largest nodal change
    per unit pseudo-time falls below ``config.steady_tol`` or after
    ``config.steps`` steps.

    Raises:
        NonFiniteError: the field blew up; the step is above the stability limit
    """
    config = config or SolverConfig()
    problem = build_problem(mesh, conditions, config.dissipation)
    j_inv = physical_inverse_jacobian(problem)[:, None]
    rates = np.array([1.0, 1.0, ARTIFICIAL_COMPRESSIBILITY])
    free = ~problem.fixed
    field = problem.clamp(np.zeros((problem.n_nodes, 3)) if field0 is None else np.array(field0, dtype=np.float64))
    report = SolveReport("pseudo_time", False, 0, np.inf, np.inf, np.inf)
    stepping = f"dt = {config.dt:g}" if config.dt is not None else f"CFL = {config.cfl:g}"
    logger.info(f"Pseudo-time march on {problem.n_nodes} nodes at Re = {conditions.reynolds:g}, {stepping}")

    for step in range(config.steps):
        dt = local_time_step(problem, field, config)
        stage = field
        for alpha in RK_STAGES:
            R = problem.residuals(stage)
            # residual columns are (cont, mom_x, mom_y); unknowns are (u, v, p)
            rhs = -R.array()[:, [1, 2, 0]] * rates / j_inv
            updated = field + alpha * dt * np.where(free, rhs, 0.0)
            balanced = outlet_pressure(stage, R, problem)
            updated[R.outlet_nodes, 2] = balanced[R.outlet_nodes, 2]
            stage = problem.clamp(updated)
            if not np.all(np.isfinite(stage)):
                error_msg = f"Pseudo-time march blew up at step {step} ({stepping}); reduce the step"
                logger.error(error_msg)
                raise NonFiniteError(error_msg)
        change = float(np.max(np.abs(stage - field) / dt))
        field = stage
        report.iterations = step + 1
        report.history.append(change)
        if step % config.log_every == 0:
            logger.info(f"pseudo-time step {step}: max rate {change:.3e}")
        if change <= config.steady_tol:
            report.converged = True
            break

    final = loss(problem.residuals(field), config.loss_weights).item()
    report.final_loss = report.best_loss = final
    report.initial_loss = loss(problem.residuals(problem.clamp(np.zeros_like(field))), config.loss_weights).item()
    return _finish(problem, field, report)
