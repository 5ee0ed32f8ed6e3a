"""
Post-processing: error metrics, body forces, and field export.

CSV exports store every float as a hex literal so that ``import_csv``
reproduces the field bit for bit; decimal mirror columns follow for
people reading the file.
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Tuple, Union

import numpy as np

from gcfdm.errors import NumericalError, OpenLoopError, StorageError
from gcfdm.graph import ETA, XI, CompGraph, build_graphs, gather
from gcfdm.mesh import MultiBlockMesh
from gcfdm.metrics import compute_metrics
from gcfdm.residual import FlowField
from gcfdm.storage import write_file

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Quantity = Literal["velocity_magnitude", "pressure"]

CSV_COLUMNS = ("block", "i", "j", "x", "y", "u", "v", "p")
DECIMAL_COLUMNS = ("x_dec", "y_dec", "u_dec", "v_dec", "p_dec")


def _as_values(field: Union[FlowField, np.ndarray]) -> np.ndarray:
    return field.values if isinstance(field, FlowField) else np.asarray(field, dtype=np.float64)


def relative_mae(pred, ref, quantity: Quantity = "velocity_magnitude") -> float:
    """
    sum |f_pred - f_ref| / sum |f_ref| over all nodes.

    Raises:
        NumericalError: the reference has zero L1 norm
    """
    pred, ref = _as_values(pred), _as_values(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"Field shapes differ: {pred.shape} vs {ref.shape}")
    if quantity == "velocity_magnitude":
        f_pred, f_ref = np.hypot(pred[:, 0], pred[:, 1]), np.hypot(ref[:, 0], ref[:, 1])
    elif quantity == "pressure":
        f_pred, f_ref = pred[:, 2], ref[:, 2]
    else:
        raise ValueError(f"Unknown quantity {quantity!r}")
    norm = np.sum(np.abs(f_ref))
    if norm == 0.0:
        error_msg = f"Reference {quantity} has zero norm; relative error undefined"
        logger.error(error_msg)
        raise NumericalError(error_msg)
    return float(np.sum(np.abs(f_pred - f_ref)) / norm)


# ==============================================================================
# Body surface


@dataclass(eq=False)
class SurfaceLoop:
    """A closed node loop ordered counterclockwise; ``com`` holds one block copy per node"""

    nodes: np.ndarray
    com: np.ndarray
    coords: np.ndarray

    @property
    def segments(self) -> np.ndarray:
        """(n, 2) coordinate increments from each node to the next"""
        return np.roll(self.coords, -1, axis=0) - self.coords


def surface_loop(mesh: MultiBlockMesh, label: str) -> SurfaceLoop:
    """
    Walk the boundary patches carrying ``label`` into one closed loop.

    Raises:
        OpenLoopError: no such patches, or they do not close into a single loop
    """
    patches = [p for p in mesh.boundaries if p.label == label]
    if not patches:
        raise OpenLoopError(f"No boundary patch labelled {label!r}")

    neighbours: Dict[int, set] = {}
    com_of: Dict[int, int] = {}
    for patch in patches:
        ids = []
        for i, j in mesh.patch_nodes(patch):
            raw = mesh.raw_index(patch.block, i, j)
            k = int(mesh.physical_index[raw])
            com_of.setdefault(k, raw)
            ids.append(k)
        for a, b in zip(ids[:-1], ids[1:]):
            neighbours.setdefault(a, set()).add(b)
            neighbours.setdefault(b, set()).add(a)

    open_ends = sorted(k for k, nbrs in neighbours.items() if len(nbrs) != 2)
    if open_ends:
        error_msg = f"Patch {label!r} is not a closed loop: {len(open_ends)} node(s) without two neighbours"
        logger.error(error_msg)
        raise OpenLoopError(error_msg)

    start = min(neighbours)
    loop, previous, current = [start], None, start
    while True:
        nxt = min(k for k in neighbours[current] if k != previous)
        if nxt == start:
            break
        loop.append(nxt)
        previous, current = current, nxt
    if len(loop) != len(neighbours):
        raise OpenLoopError(f"Patch {label!r} splits into several loops")

    nodes = np.array(loop, dtype=np.int64)
    coords = mesh.physical_coords()[nodes]
    x, y = coords[:, 0], coords[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    if area < 0:
        nodes, coords = nodes[::-1], coords[::-1]
    com = np.array([com_of[k] for k in nodes], dtype=np.int64)
    return SurfaceLoop(nodes=nodes, com=com, coords=coords)


def _wall_normal_derivative(values: np.ndarray, mesh: MultiBlockMesh, cg: CompGraph, loop: SurfaceLoop) -> np.ndarray:
    """du/dn at the loop nodes, n pointing from the body into the fluid"""
    metrics = compute_metrics(mesh, cg)
    u = gather(values[:, 0], cg)
    u_xi = cg.central_operator(XI).apply(u, cg.n_nodes)[loop.com]
    u_eta = cg.central_operator(ETA).apply(u, cg.n_nodes)[loop.com]
    c = loop.com
    u_x = metrics.xi_x[c] * u_xi + metrics.eta_x[c] * u_eta
    u_y = metrics.xi_y[c] * u_xi + metrics.eta_y[c] * u_eta

    seg = loop.segments
    # outward from the body for a counterclockwise loop
    seg_normal = np.stack([seg[:, 1], -seg[:, 0]], axis=1)
    node_normal = seg_normal + np.roll(seg_normal, 1, axis=0)
    node_normal /= np.linalg.norm(node_normal, axis=1, keepdims=True)
    return u_x * node_normal[:, 0] + u_y * node_normal[:, 1]


def body_forces(field, mesh: MultiBlockMesh, re: float, label: str = "cylinder") -> Dict[str, float]:
    """
    Streamwise pressure and viscous force on a body, trapezoidal over the loop segments.

    F_x = sum over segments of -p_mid n_x ds + (1/Re) (du/dn)_mid ds, with
    unit density and n the outward body normal.
    """
    values = _as_values(field)
    loop = surface_loop(mesh, label)
    _, cg = build_graphs(mesh)
    seg = loop.segments
    ds = np.linalg.norm(seg, axis=1)
    # n ds = (dy, -dx) for a counterclockwise loop
    n_x_ds = seg[:, 1]

    p = values[loop.nodes, 2]
    p_mid = 0.5 * (p + np.roll(p, -1))
    pressure = float(np.sum(-p_mid * n_x_ds))

    dudn = _wall_normal_derivative(values, mesh, cg, loop)
    dudn_mid = 0.5 * (dudn + np.roll(dudn, -1))
    viscous = float(np.sum(dudn_mid * ds) / re)
    return {"pressure": pressure, "viscous": viscous, "total": pressure + viscous}


def drag_coefficient(
    field,
    mesh: MultiBlockMesh,
    re: float,
    label: str = "cylinder",
    u_mean: float = 0.2,
    diameter: float = 0.1,
) -> float:
    """
    C_d = 2 F_x / (U_mean^2 D).

    Args:
        re: coefficient of the viscous term, i.e. 1/nu for the channel cases

    Raises:
        OpenLoopError: the labelled patches do not form a closed loop
    """
    forces = body_forces(field, mesh, re, label)
    c_d = 2.0 * forces["total"] / (u_mean**2 * diameter)
    logger.debug(f"Drag on {label!r}: pressure {forces['pressure']:.4e}, viscous {forces['viscous']:.4e}, C_d {c_d:.4f}")
    return c_d


def surface_pressure(field, mesh: MultiBlockMesh, label: str = "cylinder") -> Tuple[np.ndarray, np.ndarray]:
    """Pressure along a body loop against the polar angle (degrees, [0, 360)) about the loop centroid"""
    values = _as_values(field)
    loop = surface_loop(mesh, label)
    centre = loop.coords.mean(axis=0)
    angle = np.degrees(np.arctan2(loop.coords[:, 1] - centre[1], loop.coords[:, 0] - centre[0])) % 360.0
    angle[angle >= 360.0] = 0.0  # tiny negative angles round up to 360
    order = np.argsort(angle, kind="stable")
    return angle[order], values[loop.nodes[order], 2]


# ==============================================================================
# Export


def _block_values(values: np.ndarray, mesh: MultiBlockMesh, b: int) -> np.ndarray:
    start, end = mesh.block_offsets[b], mesh.block_offsets[b + 1]
    return values[mesh.physical_index[start:end]]


def vtk_structured(values: np.ndarray, mesh: MultiBlockMesh, b: int) -> str:
    block = mesh.blocks[b]
    data = _block_values(values, mesh, b)
    points = block.flat_coords()
    lines = [
        "# vtk DataFile Version 3.0",
        f"gcfdm field block {b}",
        "ASCII",
        "DATASET STRUCTURED_GRID",
        f"DIMENSIONS {block.ni} {block.nj} 1",
        f"POINTS {block.size} double",
    ]
    lines.extend(f"{x!r} {y!r} 0.0" for x, y in points.tolist())
    lines.append(f"POINT_DATA {block.size}")
    arrays = {
        "u": data[:, 0],
        "v": data[:, 1],
        "p": data[:, 2],
        "U": np.hypot(data[:, 0], data[:, 1]),
    }
    for name, column in arrays.items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines.extend(repr(value) for value in column.tolist())
    return "\n".join(lines) + "\n"


def field_csv(values: np.ndarray, mesh: MultiBlockMesh) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + DECIMAL_COLUMNS)
    for b, block in enumerate(mesh.blocks):
        data = _block_values(values, mesh, b)
        for row, (x, y) in enumerate(block.flat_coords().tolist()):
            i, j = row % block.ni, row // block.ni
            numbers = [x, y] + data[row].tolist()
            writer.writerow([b, i, j] + [float(n).hex() for n in numbers] + [repr(float(n)) for n in numbers])
    return buffer.getvalue()


def export_field(
    field, mesh: MultiBlockMesh, path: PathLike, fmt: Literal["vtk", "csv"] = "vtk"
) -> List[Path]:
    """
    Write a field as legacy VTK (one structured grid per block) or CSV.

    A multi-block VTK export writes ``<stem>_block<k>.vtk`` per block.

    Raises:
        StorageError: a file could not be written
    """
    values = _as_values(field)
    path = Path(path)
    if fmt == "csv":
        return [write_file(path, field_csv(values, mesh))]
    if fmt != "vtk":
        raise ValueError(f"Unknown export format {fmt!r}")
    if len(mesh.blocks) == 1:
        return [write_file(path, vtk_structured(values, mesh, 0))]
    written = []
    for b in range(len(mesh.blocks)):
        target = path.with_name(f"{path.stem}_block{b}{path.suffix or '.vtk'}")
        written.append(write_file(target, vtk_structured(values, mesh, b)))
    logger.info(f"Exported {len(written)} VTK block file(s) next to {path}")
    return written


def import_csv(path: PathLike, mesh: MultiBlockMesh) -> FlowField:
    """
    Read a CSV export back onto the mesh's physical nodes.

    Raises:
        StorageError: unreadable file, bad columns, or rows that do not match the mesh
    """
    path = Path(path)
    try:
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {str(e)}")
    if len(rows) != mesh.n_block_nodes:
        raise StorageError(f"{path}: {len(rows)} rows for a mesh with {mesh.n_block_nodes} block nodes")

    values = np.zeros((mesh.n_nodes, 3))
    try:
        for row in rows:
            b, i, j = int(row["block"]), int(row["i"]), int(row["j"])
            k = mesh.physical_index[mesh.raw_index(b, i, j)]
            values[k] = [float.fromhex(row[name]) for name in ("u", "v", "p")]
    except (KeyError, ValueError, IndexError) as e:
        raise StorageError(f"{path}: malformed row ({str(e)})")
    return FlowField(values)
