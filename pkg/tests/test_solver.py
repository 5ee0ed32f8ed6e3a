import numpy as np
import pytest
from pydantic import ValidationError

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.boundary import FlowConditions, parabolic_profile
from gcfdm.errors import NonFiniteError
from gcfdm.generators import CHANNEL_HEIGHT, CHANNEL_LENGTH, generate_cavity, generate_channel, split_block
from gcfdm.mesh import NodeType
from gcfdm.optim import WarmRestarts
from gcfdm.post import relative_mae
from gcfdm.residual import assemble_residuals_gc, loss, loss_terms
from gcfdm.solver import (
    DivergenceGuard,
    SolverConfig,
    build_problem,
    direct_solve,
    local_time_step,
    outlet_pressure,
    pseudo_time_solve,
    residual_norms,
)

UNIT_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


def poiseuille(mesh, conditions):
    """Fully developed channel flow with zero pressure at the outlet"""
    coords = mesh.physical_coords()
    U = conditions.inlet_velocity
    u = parabolic_profile(coords[:, 1], U, CHANNEL_HEIGHT)
    gradient = 8.0 * U / (conditions.viscous_re * CHANNEL_HEIGHT**2)
    p = gradient * (CHANNEL_LENGTH - coords[:, 0])
    return np.stack([u, np.zeros_like(u), p], axis=1)


def by_coordinates(mesh, other):
    """Index into ``mesh`` nodes for every node of ``other``, matched by position"""
    lookup = {tuple(c): k for k, c in enumerate(mesh.physical_coords().tolist())}
    return np.array([lookup[tuple(c)] for c in other.physical_coords().tolist()], dtype=np.int64)


@pytest.fixture
def still_cavity():
    """Cavity with a lid at rest: the zero field is the exact solution"""
    return generate_cavity(5), FlowConditions.cavity(100.0, lid_velocity=0.0)


class TestDirectSolve:
    """Test cases for minimizing the residual loss over nodal unknowns"""

    @pytest.mark.parametrize("method", ["adamw", "lbfgs"])
    def test_zero_lid_is_converged(self, still_cavity, method):
        mesh, conditions = still_cavity
        field, report = direct_solve(mesh, conditions, SolverConfig(method=method, max_iters=5))
        assert report.converged
        assert report.final_loss == 0.0
        assert np.all(field.values == 0.0)

    def test_adamw_never_returns_worse_than_start(self):
        mesh = generate_cavity(5)
        field, report = direct_solve(mesh, FlowConditions.cavity(10.0), SolverConfig(max_iters=30, lr=1e-3))
        assert report.best_loss <= report.initial_loss
        assert report.iterations <= 30
        assert len(report.history) <= 30
        lid = mesh.node_types == NodeType.MOVING_LID
        assert np.allclose(field.u[lid], 1.0)

    def test_lbfgs_reduces_loss(self):
        mesh = generate_cavity(5)
        field, report = direct_solve(mesh, FlowConditions.cavity(10.0), SolverConfig(method="lbfgs", max_iters=50))
        assert report.final_loss < report.initial_loss
        assert not report.diverged
        lid = mesh.node_types == NodeType.MOVING_LID
        assert np.allclose(field.u[lid], 1.0)

    def test_report_dict(self, still_cavity):
        mesh, conditions = still_cavity
        _, report = direct_solve(mesh, conditions, SolverConfig(max_iters=2))
        summary = report.as_dict()
        assert summary["method"] == "adamw"
        assert "cont_max" in summary["residual_norms"]
        assert "L_p" in summary["residual_norms"]

    def test_adamw_runs_through_restarts(self):
        """Test that the loss jump after a warm restart does not stop the descent"""
        config = SolverConfig(lr=1e-3, restart_period=20, max_iters=60)
        _, report = direct_solve(generate_cavity(5), FlowConditions.cavity(10.0), config)
        assert not report.diverged
        assert report.iterations == 60
        assert report.best_loss < report.initial_loss

    def test_poiseuille(self):
        mesh = generate_channel(13, 7)
        conditions = FlowConditions.channel(20.0)
        field, report = direct_solve(mesh, conditions, SolverConfig(method="lbfgs", max_iters=3000))
        assert not report.diverged
        exact = poiseuille(mesh, conditions)
        assert relative_mae(field, exact) <= 1e-3
        assert np.max(np.abs(field.v)) < 1e-3

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            SolverConfig(method="newton")


class TestPseudoTime:
    """Test cases for artificial-compressibility marching"""

    def test_zero_lid_stops_immediately(self, still_cavity):
        mesh, conditions = still_cavity
        field, report = pseudo_time_solve(mesh, conditions, SolverConfig(steps=10))
        assert report.converged
        assert report.iterations == 1
        assert np.all(field.values == 0.0)

    def test_march_keeps_boundary_data(self):
        mesh = generate_cavity(9)
        problem = build_problem(mesh, FlowConditions.cavity(10.0))
        field, report = pseudo_time_solve(mesh, FlowConditions.cavity(10.0), SolverConfig(dt=1e-3, steps=50))
        assert report.iterations == 50
        assert np.all(np.isfinite(field.values))
        assert np.array_equal(field.values[problem.mask], problem.values[problem.mask])

    def test_unstable_step_raises(self):
        with pytest.raises(NonFiniteError):
            pseudo_time_solve(generate_cavity(5), FlowConditions.cavity(10.0), SolverConfig(dt=1e3, steps=500))


class TestOutletPressure:
    def test_traction_balance(self, channel_mesh):
        """Test that a resting fluid at unit pressure gets p = 0 at the outlet"""
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        field = np.tile([0.0, 0.0, 1.0], (channel_mesh.n_nodes, 1))
        R = problem.residuals(field)
        updated = outlet_pressure(field, R, problem)
        assert np.allclose(updated[R.outlet_nodes, 2], 0.0)
        untouched = np.setdiff1d(np.arange(channel_mesh.n_nodes), R.outlet_nodes)
        assert np.all(updated[untouched, 2] == 1.0)

    def test_residual_norms(self, channel_mesh):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        norms = residual_norms(problem.residuals(np.tile([0.0, 0.0, 1.0], (channel_mesh.n_nodes, 1))))
        assert norms["outlet_max"] == pytest.approx(1.0)
        assert norms["cont_max"] == pytest.approx(0.0, abs=1e-14)


class TestDivergenceGuard:
    """Test cases for divergence detection under warm restarts"""

    @pytest.fixture
    def guard(self):
        # cycles start at 0, 4, 12 and 28
        return DivergenceGuard(WarmRestarts(1.0, 0.0, period=4, growth=2))

    def test_first_cycle_jump(self, guard):
        assert not guard(0, 1.0)
        assert guard(1, 20.0)

    def test_restart_spike_allowed(self, guard):
        for it, value in enumerate([1.0, 0.5, 0.2, 0.1]):
            assert not guard(it, value)
        assert not guard(4, 5.0)
        assert not guard(5, 50.0)
        assert not guard(11, 0.5)

    def test_cycle_ending_high(self, guard):
        """Test that a cycle ending far above the best loss before it trips the guard"""
        for it, value in enumerate([1.0, 0.5, 0.2, 0.1]):
            guard(it, value)
        for it in range(4, 11):
            assert not guard(it, 3.0)
        assert guard(11, 2.0)

    def test_non_finite(self, guard):
        guard(0, 1.0)
        assert guard(1, float("nan"))
        assert guard(2, float("inf"))


class TestStabilization:
    """Test cases for the solver-side dissipation and wall pressure closure"""

    def test_poiseuille_is_untouched(self, channel_mesh):
        conditions = FlowConditions.channel(20.0)
        problem = build_problem(channel_mesh, conditions)
        exact = poiseuille(channel_mesh, conditions)
        assert np.max(np.abs(problem.stabilization.dissipation(exact).data)) < 1e-12
        assert np.allclose(problem.clamp(exact), exact, rtol=0.0, atol=1e-14)
        R = problem.residuals(exact)
        assert np.max(np.abs(R.array())) < 1e-10
        assert np.max(np.abs(R.r_p)) < 1e-10

    def test_checkerboard_is_damped(self, channel_mesh):
        """Test that L(L q) of an odd-even pressure mode is 64 q at regular nodes"""
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        coords = channel_mesh.physical_coords()
        parity = np.round(coords[:, 0] / (CHANNEL_LENGTH / 8)) + np.round(coords[:, 1] / (CHANNEL_HEIGHT / 4))
        field = np.zeros((channel_mesh.n_nodes, 3))
        field[:, 2] = (-1.0) ** parity
        coefficient = problem.stabilization.coefficient
        regular = coefficient > 0
        assert regular.sum() == 5
        damping = problem.stabilization.dissipation(field).data
        assert np.allclose(damping[regular, 0], 64.0 * coefficient[regular] * field[regular, 2])
        assert np.all(damping[~regular] == 0.0)
        assert np.all(damping[:, 1:] == 0.0)

    def test_wall_pressure_extrapolated(self, channel_mesh):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        coords = channel_mesh.physical_coords()
        field = np.zeros((channel_mesh.n_nodes, 3))
        field[:, 2] = 1.0 + 2.0 * coords[:, 0] - 3.0 * coords[:, 1]
        expected = field[:, 2].copy()
        walls = problem.stabilization.wall_nodes
        field[walls, 2] = 99.0
        assert np.allclose(problem.clamp(field)[:, 2], expected)

    def test_tensor_closure_matches_array(self, channel_mesh, rng):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        field = rng.normal(size=(channel_mesh.n_nodes, 3))
        closed = problem.stabilization.extrapolate(Tensor(field))
        assert np.allclose(closed.data, problem.stabilization.extrapolate(field))

    def test_fixed_entries(self, channel_mesh):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        walls = problem.stabilization.wall_nodes
        assert walls.size == int(problem.mask[:, 0].sum())
        assert np.array_equal(problem.fixed[:, :2], problem.mask[:, :2])
        assert np.all(problem.fixed[walls, 2])
        outlet = channel_mesh.node_types == NodeType.OUTLET
        assert outlet.any()
        assert not np.any(problem.fixed[outlet])

    def test_cavity_anchor_keeps_its_value(self):
        mesh = generate_cavity(9)
        problem = build_problem(mesh, FlowConditions.cavity(100.0))
        anchor = mesh.anchor_node()
        assert anchor not in problem.stabilization.wall_nodes
        field = problem.clamp(np.ones((mesh.n_nodes, 3)))
        assert field[anchor, 2] == 0.0
        assert np.array_equal(field[problem.mask], problem.values[problem.mask])

    def test_without_dissipation(self, channel_mesh, graphs_of, rng):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0), dissipation=0.0)
        _, cg, metrics = graphs_of(channel_mesh)
        field = rng.normal(size=(channel_mesh.n_nodes, 3))
        raw = assemble_residuals_gc(field, metrics, cg, problem.re)
        assert np.array_equal(problem.residuals(field).array(), raw.array())

    def test_gradient_skips_fixed_entries(self, channel_mesh, rng):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        unknowns = Tensor(rng.normal(size=(channel_mesh.n_nodes, 3)), requires_grad=True)
        with ad.Tape() as tape:
            total = loss(problem.residuals(problem.clamp(unknowns)))
        ad.backward(total, tape)
        assert np.all(unknowns.grad[problem.fixed] == 0.0)
        assert np.any(unknowns.grad[~problem.fixed] != 0.0)


class TestLocalTimeStep:
    """Test cases for pseudo-time step sizes"""

    def test_fixed_step(self, channel_mesh):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        dt = local_time_step(problem, np.zeros((channel_mesh.n_nodes, 3)), SolverConfig(dt=1e-3))
        assert dt.shape == (channel_mesh.n_nodes, 1)
        assert np.all(dt == 1e-3)

    def test_step_scales_with_cfl(self, channel_mesh, rng):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        field = rng.uniform(-0.3, 0.3, size=(channel_mesh.n_nodes, 3))
        full = local_time_step(problem, field, SolverConfig(cfl=0.5))
        half = local_time_step(problem, field, SolverConfig(cfl=0.25))
        assert np.all(full > 0.0)
        assert np.allclose(half, 0.5 * full)

    def test_faster_flow_takes_smaller_steps(self, channel_mesh):
        problem = build_problem(channel_mesh, FlowConditions.channel(20.0))
        rest = np.zeros((channel_mesh.n_nodes, 3))
        moving = rest.copy()
        moving[:, 0] = 2.0
        config = SolverConfig()
        assert np.all(local_time_step(problem, moving, config) < local_time_step(problem, rest, config))

    def test_poiseuille_is_steady(self, channel_mesh):
        conditions = FlowConditions.channel(20.0)
        exact = poiseuille(channel_mesh, conditions)
        field, report = pseudo_time_solve(channel_mesh, conditions, SolverConfig(steps=5), field0=exact)
        assert report.converged
        assert report.iterations == 1
        assert np.allclose(field.values, exact, rtol=0.0, atol=1e-12)


class TestLossConsistency:
    def test_norms_bounded_by_loss(self, rng):
        """Test that max |R|^2 never exceeds the node count times the unit-weight loss"""
        mesh = generate_cavity(9)
        problem = build_problem(mesh, FlowConditions.cavity(10.0))
        R = problem.residuals(problem.clamp(rng.normal(size=(mesh.n_nodes, 3))))
        norms = residual_norms(R)
        total = loss(R, UNIT_WEIGHTS).item()
        rows = int(R.contributing.sum())
        for name, term in zip(("cont", "mom_x", "mom_y"), loss_terms(R)):
            assert norms[f"{name}_rms"] ** 2 == pytest.approx(term.item())
            assert norms[f"{name}_max"] ** 2 <= rows * total


@pytest.mark.integration
class TestAcceptance:
    """Test cases for the long solver acceptance runs"""

    def test_cavity_loss_drop(self):
        config = SolverConfig(method="lbfgs", max_iters=8000)
        _, report = direct_solve(generate_cavity(33), FlowConditions.cavity(100.0), config)
        assert not report.diverged
        assert np.log10(report.initial_loss / report.final_loss) >= 6.0

    def test_adamw_past_restarts(self):
        config = SolverConfig(max_iters=3000, restart_period=500)
        _, report = direct_solve(generate_cavity(17), FlowConditions.cavity(100.0), config)
        assert not report.diverged
        assert report.converged or report.iterations == 3000
        assert report.best_loss < 1e-3 * report.initial_loss

    def test_poiseuille_fine_grid(self):
        mesh = generate_channel(61, 31)
        conditions = FlowConditions.channel(20.0)
        field, _ = direct_solve(mesh, conditions, SolverConfig(method="lbfgs", max_iters=8000))
        assert relative_mae(field, poiseuille(mesh, conditions)) <= 1e-3

    def test_pseudo_time_matches_direct(self):
        mesh = generate_cavity(17)
        conditions = FlowConditions.cavity(100.0)
        direct, _ = direct_solve(mesh, conditions, SolverConfig(method="lbfgs", max_iters=6000))
        marched, report = pseudo_time_solve(mesh, conditions, SolverConfig(steady_tol=1e-8, steps=100000))
        assert report.converged
        assert relative_mae(marched, direct) <= 1e-2

    def test_halving_step_keeps_solution(self):
        mesh = generate_cavity(9)
        conditions = FlowConditions.cavity(10.0)
        fields = []
        for cfl in (0.5, 0.25):
            field, report = pseudo_time_solve(mesh, conditions, SolverConfig(cfl=cfl, steady_tol=1e-12, steps=200000))
            assert report.converged
            fields.append(field.values)
        assert np.max(np.abs(fields[0] - fields[1])) <= 1e-6

    def test_converged_loss_bounds_residuals(self):
        mesh = generate_cavity(9)
        config = SolverConfig(method="lbfgs", max_iters=4000, loss_weights=UNIT_WEIGHTS)
        _, report = direct_solve(mesh, FlowConditions.cavity(10.0), config)
        assert report.final_loss <= 1e-12
        for name in ("cont", "mom_x", "mom_y"):
            assert report.residual_norms[f"{name}_max"] <= 1e-5

    def test_split_mesh_same_solution(self):
        mesh = generate_channel(13, 7)
        split = split_block(mesh, 0, 6)
        conditions = FlowConditions.channel(20.0)
        config = SolverConfig(method="lbfgs", max_iters=4000)
        whole, _ = direct_solve(mesh, conditions, config)
        parts, _ = direct_solve(split, conditions, config)
        order = by_coordinates(mesh, split)
        assert np.max(np.abs(whole.values[order] - parts.values)) <= 1e-10
