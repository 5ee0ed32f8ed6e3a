import numpy as np
import pytest

from gcfdm.boundary import FlowConditions
from gcfdm.errors import NumericalError, OpenLoopError, StorageError
from gcfdm.generators import generate_cavity, generate_cylinder_channel
from gcfdm.mesh import MultiBlockMesh
from gcfdm.post import (
    CSV_COLUMNS,
    DECIMAL_COLUMNS,
    body_forces,
    drag_coefficient,
    export_field,
    import_csv,
    relative_mae,
    surface_loop,
    surface_pressure,
)
from gcfdm.residual import FlowField
from gcfdm.solver import SolverConfig, direct_solve

DFG_DRAG_RE20 = 5.58


@pytest.fixture(scope="module")
def cylinder_mesh():
    return generate_cylinder_channel(resolution="coarse")


class TestRelativeMAE:
    """Test cases for the relative mean absolute error"""

    def test_identical_fields(self, rng):
        field = rng.normal(size=(10, 3))
        assert relative_mae(field, field) == 0.0
        assert relative_mae(field, field, "pressure") == 0.0

    def test_uniform_ten_percent(self, rng):
        ref = rng.normal(size=(10, 3))
        assert relative_mae(FlowField(1.1 * ref), FlowField(ref)) == pytest.approx(0.1)
        assert relative_mae(1.1 * ref, ref, "pressure") == pytest.approx(0.1)

    def test_zero_reference(self):
        with pytest.raises(NumericalError):
            relative_mae(np.ones((4, 3)), np.zeros((4, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            relative_mae(np.ones((4, 3)), np.ones((5, 3)))


class TestSurface:
    """Test cases for body loops, forces and surface pressure"""

    def test_cylinder_loop(self, cylinder_mesh):
        loop = surface_loop(cylinder_mesh, "cylinder")
        assert loop.nodes.size == 32
        assert np.allclose(np.hypot(loop.coords[:, 0] - 0.2, loop.coords[:, 1] - 0.2), 0.05)
        x, y = loop.coords[:, 0], loop.coords[:, 1]
        assert np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0.0

    def test_missing_label(self, cylinder_mesh):
        with pytest.raises(OpenLoopError):
            surface_loop(cylinder_mesh, "airfoil")

    def test_open_patch(self):
        """Test that a single labelled side does not close"""
        mesh = generate_cavity(5)
        boundaries = tuple(
            p.model_copy(update={"label": "lid"}) if p.side.value == "j_max" else p for p in mesh.boundaries
        )
        labelled = MultiBlockMesh(mesh.blocks, mesh.interfaces, boundaries, mesh.pressure_anchor)
        with pytest.raises(OpenLoopError):
            surface_loop(labelled, "lid")

    def test_uniform_pressure_has_no_drag(self, cylinder_mesh):
        """Test that a uniform pressure integrates to zero force on a closed body"""
        values = np.zeros((cylinder_mesh.n_nodes, 3))
        values[:, 2] = 1.0
        forces = body_forces(values, cylinder_mesh, 1000.0)
        assert forces["pressure"] == pytest.approx(0.0, abs=1e-12)
        assert forces["viscous"] == 0.0
        assert drag_coefficient(values, cylinder_mesh, 1000.0) == pytest.approx(0.0, abs=1e-9)

    def test_pressure_difference_gives_drag(self, cylinder_mesh):
        """Test that higher pressure upstream pushes the body downstream"""
        coords = cylinder_mesh.physical_coords()
        values = np.zeros((cylinder_mesh.n_nodes, 3))
        values[:, 2] = -coords[:, 0]
        assert body_forces(values, cylinder_mesh, 1000.0)["pressure"] > 0.0

    def test_surface_pressure_sorted(self, cylinder_mesh):
        values = np.zeros((cylinder_mesh.n_nodes, 3))
        angle, p = surface_pressure(values, cylinder_mesh)
        assert angle.size == p.size == 32
        assert np.all(np.diff(angle) >= 0.0)
        assert angle[0] >= 0.0 and angle[-1] < 360.0


class TestExport:
    """Test cases for VTK and CSV export"""

    def test_single_block_vtk(self, tmp_path, cavity_mesh, rng):
        paths = export_field(rng.normal(size=(25, 3)), cavity_mesh, tmp_path / "cavity.vtk")
        assert paths == [tmp_path / "cavity.vtk"]
        text = paths[0].read_text()
        assert "DIMENSIONS 5 5 1" in text
        assert "SCALARS U double 1" in text

    def test_multi_block_vtk(self, tmp_path, two_block_mesh, rng):
        paths = export_field(rng.normal(size=(15, 3)), two_block_mesh, tmp_path / "square.vtk")
        assert [p.name for p in paths] == ["square_block0.vtk", "square_block1.vtk"]
        assert "DIMENSIONS 3 3 1" in paths[1].read_text()

    def test_csv_round_trip(self, tmp_path, two_block_mesh, rng):
        """Test that hex floats bring the field back bit for bit"""
        values = rng.normal(size=(15, 3))
        (path,) = export_field(FlowField(values), two_block_mesh, tmp_path / "square.csv", fmt="csv")
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(CSV_COLUMNS + DECIMAL_COLUMNS)
        assert len(lines) == 1 + two_block_mesh.n_block_nodes
        assert np.array_equal(import_csv(path, two_block_mesh).values, values)

    def test_csv_for_other_mesh(self, tmp_path, cavity_mesh, two_block_mesh):
        (path,) = export_field(np.zeros((25, 3)), cavity_mesh, tmp_path / "cavity.csv", fmt="csv")
        with pytest.raises(StorageError):
            import_csv(path, two_block_mesh)

    def test_unknown_format(self, tmp_path, cavity_mesh):
        with pytest.raises(ValueError):
            export_field(np.zeros((25, 3)), cavity_mesh, tmp_path / "cavity.xyz", fmt="xyz")


@pytest.mark.integration
class TestCylinderDrag:
    """Test cases for the drag report of a direct solve at Re = 20"""

    @pytest.fixture(scope="class")
    def drag(self):
        mesh = generate_cylinder_channel(resolution="medium")
        conditions = FlowConditions.channel(20.0)
        field, _ = direct_solve(mesh, conditions, SolverConfig(method="lbfgs", max_iters=20000))
        return drag_coefficient(field, mesh, conditions.viscous_re, "cylinder", conditions.mean_velocity)

    def test_report_emitted(self, drag):
        assert np.isfinite(drag)
        assert drag > 0.0

    @pytest.mark.xfail(strict=False, reason="depends on cylinder resolution and surface integration")
    def test_within_reference(self, drag):
        assert drag == pytest.approx(DFG_DRAG_RE20, rel=0.15)
