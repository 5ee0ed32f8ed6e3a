"""
Mesh generators: the lid-driven cavity, the straight channel used for
interface tests, and body-fitted channels around one or two circular
cylinders.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from gcfdm.errors import DegenerateMeshError, GeometryError, MeshError
from gcfdm.mesh import (
    Block,
    BoundaryPatch,
    BoundaryValue,
    Interface,
    MultiBlockMesh,
    Orientation,
    PatchKind,
    Side,
    check_mesh,
)

logger = logging.getLogger(__name__)

CHANNEL_LENGTH = 2.2
CHANNEL_HEIGHT = 0.41
INLET_VELOCITY = 0.3

# n_theta: nodes per O-block along the body, n_radial: nodes from body to box,
# nx_right: nodes in the wake blocks
CYLINDER_RESOLUTIONS: Dict[str, Dict[str, int]] = {
    "coarse": {"n_theta": 9, "n_radial": 6, "nx_right": 41},
    "medium": {"n_theta": 17, "n_radial": 11, "nx_right": 81},
    "fine": {"n_theta": 33, "n_radial": 21, "nx_right": 161},
}

DOUBLE_CYLINDER_CENTERS = ((0.2, 0.16), (0.35, 0.3))
DOUBLE_CYLINDER_DIAMETERS = (0.09, 0.06)
DOUBLE_CYLINDER_BOX = 0.75


def _uniform(start: float, end: float, n: int) -> np.ndarray:
    h = (end - start) / (n - 1)
    return start + np.arange(n) * h


def _grid_block(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    x, y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([x, y], axis=-1)


def block_inverse_jacobian(coords: np.ndarray) -> np.ndarray:
    """x_xi*y_eta - x_eta*y_xi per node, second-order in index space"""
    x_xi = np.gradient(coords[..., 0], axis=0, edge_order=2)
    y_xi = np.gradient(coords[..., 1], axis=0, edge_order=2)
    x_eta = np.gradient(coords[..., 0], axis=1, edge_order=2)
    y_eta = np.gradient(coords[..., 1], axis=1, edge_order=2)
    return x_xi * y_eta - x_eta * y_xi


def check_orientation(mesh: MultiBlockMesh) -> None:
    """
    Raises:
        DegenerateMeshError: a node of some block has J_inv <= 0
    """
    for b, block in enumerate(mesh.blocks):
        j_inv = block_inverse_jacobian(block.coords)
        bad = np.argwhere(~(j_inv > 0.0))
        if bad.size:
            i, j = (int(v) for v in bad[0])
            error_msg = (
                f"Block {b} is degenerate at node ({i},{j}): J_inv = {j_inv[i, j]:.3e} "
                f"({bad.shape[0]} node(s) affected)"
            )
            logger.error(error_msg)
            raise DegenerateMeshError(error_msg)


def transfinite_interpolation(
    bottom: np.ndarray, top: np.ndarray, left: np.ndarray, right: np.ndarray
) -> np.ndarray:
    """
    Coons patch through four boundary curves.

    Args:
        bottom: (ni, 2) curve at j = 0
        top: (ni, 2) curve at j = nj-1
        left: (nj, 2) curve at i = 0
        right: (nj, 2) curve at i = ni-1

    Returns:
        np.ndarray: (ni, nj, 2) block coordinates

    Raises:
        GeometryError: the curves do not meet at common corners
    """
    bottom, top = np.asarray(bottom, dtype=np.float64), np.asarray(top, dtype=np.float64)
    left, right = np.asarray(left, dtype=np.float64), np.asarray(right, dtype=np.float64)
    if bottom.shape != top.shape or left.shape != right.shape:
        raise GeometryError("Opposite boundary curves must have the same node count")
    corners = [(bottom[0], left[0]), (bottom[-1], right[0]), (top[0], left[-1]), (top[-1], right[-1])]
    for p, q in corners:
        if np.max(np.abs(p - q)) > 1e-12:
            raise GeometryError(f"Boundary curves do not share a corner: {p} vs {q}")

    ni, nj = bottom.shape[0], left.shape[0]
    s = np.linspace(0.0, 1.0, ni)[:, None, None]
    t = np.linspace(0.0, 1.0, nj)[None, :, None]
    coords = (
        (1 - t) * bottom[:, None, :]
        + t * top[:, None, :]
        + (1 - s) * left[None, :, :]
        + s * right[None, :, :]
        - (1 - s) * (1 - t) * bottom[0]
        - s * (1 - t) * bottom[-1]
        - (1 - s) * t * top[0]
        - s * t * top[-1]
    )
    # the blend reproduces the boundary only up to rounding
    coords[:, 0] = bottom
    coords[:, -1] = top
    coords[0, :] = left
    coords[-1, :] = right
    return coords


def _snap_interfaces(mesh: MultiBlockMesh) -> MultiBlockMesh:
    """Give every copy of a shared node the coordinates of its first occurrence"""
    phys = mesh.physical_index
    shared = mesh.physical_coords()
    blocks = []
    for b, block in enumerate(mesh.blocks):
        start, end = mesh.block_offsets[b], mesh.block_offsets[b + 1]
        flat = shared[phys[start:end]]
        blocks.append(Block(flat.reshape(block.nj, block.ni, 2).transpose(1, 0, 2)))
    return MultiBlockMesh(tuple(blocks), mesh.interfaces, mesh.boundaries, mesh.pressure_anchor)


def generate_cavity(n: int, L: float = 1.0, lid_velocity: float = 1.0) -> MultiBlockMesh:
    """
    Single uniform block on [0, L]^2 with a moving top lid.

    Raises:
        GeometryError: n < 3 or L <= 0
    """
    if n < 3:
        raise GeometryError(f"Cavity needs at least 3 nodes per side, got {n}")
    if not L > 0:
        raise GeometryError(f"Cavity side length must be positive, got {L}")

    xs = np.arange(n) * (L / (n - 1))
    coords = _grid_block(xs, xs)
    boundaries = (
        BoundaryPatch(block=0, side=Side.J_MAX, kind=PatchKind.MOVING_LID, value=BoundaryValue(u=lid_velocity)),
        BoundaryPatch(block=0, side=Side.I_MIN, range=(0, n - 2), kind=PatchKind.WALL),
        BoundaryPatch(block=0, side=Side.I_MAX, range=(0, n - 2), kind=PatchKind.WALL),
        BoundaryPatch(block=0, side=Side.J_MIN, kind=PatchKind.WALL),
    )
    mesh = MultiBlockMesh((Block(coords),), (), boundaries, pressure_anchor=(0, 0, n - 1))
    logger.debug(f"Generated {n}x{n} cavity of side {L}")
    return mesh


def _parabolic_inlet(U: float, height: float, y0: float = 0.0) -> BoundaryValue:
    return BoundaryValue(profile="parabolic", U=U, height=height, y0=y0)


def generate_channel(
    nx: int,
    ny: int,
    n_splits: int = 0,
    length: float = CHANNEL_LENGTH,
    height: float = CHANNEL_HEIGHT,
    U: float = INLET_VELOCITY,
) -> MultiBlockMesh:
    """
    Uniform rectangle [0, length] x [0, height] split into n_splits + 1 blocks along i.

    Raises:
        GeometryError: a split leaves a block with fewer than 3 i-nodes
    """
    if nx < 3 or ny < 3:
        raise GeometryError(f"Channel needs nx, ny >= 3, got {nx}x{ny}")
    if n_splits < 0:
        raise GeometryError(f"n_splits must be non-negative, got {n_splits}")

    n_blocks = n_splits + 1
    breaks = [int(round(k * (nx - 1) / n_blocks)) for k in range(n_blocks + 1)]
    widths = [b - a + 1 for a, b in zip(breaks[:-1], breaks[1:])]
    if min(widths) < 3:
        error_msg = f"Splitting {nx} nodes into {n_blocks} blocks gives block widths {widths}"
        logger.error(error_msg)
        raise GeometryError(error_msg)

    xs = np.arange(nx) * (length / (nx - 1))
    ys = np.arange(ny) * (height / (ny - 1))
    blocks = tuple(Block(_grid_block(xs[a : b + 1], ys)) for a, b in zip(breaks[:-1], breaks[1:]))
    interfaces = tuple(
        Interface(block_a=k, side_a=Side.I_MAX, block_b=k + 1, side_b=Side.I_MIN) for k in range(n_splits)
    )

    boundaries: List[BoundaryPatch] = [
        BoundaryPatch(block=0, side=Side.I_MIN, kind=PatchKind.INLET, value=_parabolic_inlet(U, height))
    ]
    for k, block in enumerate(blocks):
        wall_range = (1, block.ni - 1) if k == 0 else (0, block.ni - 1)
        boundaries.append(BoundaryPatch(block=k, side=Side.J_MIN, range=wall_range, kind=PatchKind.WALL))
        boundaries.append(BoundaryPatch(block=k, side=Side.J_MAX, range=wall_range, kind=PatchKind.WALL))
    boundaries.append(BoundaryPatch(block=n_blocks - 1, side=Side.I_MAX, range=(1, ny - 2), kind=PatchKind.OUTLET))

    mesh = MultiBlockMesh(blocks, interfaces, tuple(boundaries))
    logger.debug(f"Generated {nx}x{ny} channel in {n_blocks} block(s)")
    return mesh


def _ring_blocks(
    cx: float, cy: float, diameter: float, half_width: float, n_theta: int, n_radial: int
) -> List[np.ndarray]:
    """Four O-blocks (bottom, left, top, right) between the cylinder and its square box"""
    r, a = 0.5 * diameter, half_width
    starts = np.deg2rad([-45.0, -135.0, 135.0, 45.0])
    box_corner = {
        -45: (cx + a, cy - a),
        -135: (cx - a, cy - a),
        135: (cx - a, cy + a),
        45: (cx + a, cy + a),
    }
    corner_keys = [(-45, -135), (-135, 135), (135, 45), (45, -45)]
    blocks = []
    for start, (k0, k1) in zip(starts, corner_keys):
        theta = start - np.arange(n_theta) * (0.5 * np.pi / (n_theta - 1))
        body = np.stack([cx + r * np.cos(theta), cy + r * np.sin(theta)], axis=-1)
        p0, p1 = np.array(box_corner[k0]), np.array(box_corner[k1])
        s = np.arange(n_theta)[:, None] / (n_theta - 1)
        box = p0 + s * (p1 - p0)
        t = np.arange(n_radial)[:, None] / (n_radial - 1)
        left = body[0] + t * (box[0] - body[0])
        right = body[-1] + t * (box[-1] - body[-1])
        blocks.append(transfinite_interpolation(body, box, left, right))
    return blocks


def _partition(
    spans: Sequence[Tuple[float, float]], end: float, h: float, axis: str
) -> Tuple[List[Tuple[float, float]], List[int]]:
    """
    Split [0, end] at the box edges into intervals. Box spans along one axis
    must coincide or leave at least two cells between them.

    Returns:
        tuple: the intervals in order, and for every span the index of its interval
    """
    distinct: List[Tuple[float, float]] = []
    for span in sorted(spans):
        if distinct and np.allclose(span, distinct[-1]):
            continue
        if distinct and span[0] - distinct[-1][1] < 2 * h:
            error_msg = f"Cylinder boxes {distinct[-1]} and {span} overlap or leave less than two cells along {axis}"
            logger.error(error_msg)
            raise GeometryError(error_msg)
        distinct.append(span)

    intervals: List[Tuple[float, float]] = []
    cursor = 0.0
    for lo, hi in distinct:
        intervals += [(cursor, lo), (lo, hi)]
        cursor = hi
    intervals.append((cursor, end))
    owner = [next(k for k, iv in enumerate(intervals) if np.allclose(iv, span)) for span in spans]
    return intervals, owner


def generate_cylinders_channel(
    centers: Sequence[Sequence[float]],
    diameters: Sequence[float],
    resolution: str = "coarse",
    length: float = CHANNEL_LENGTH,
    height: float = CHANNEL_HEIGHT,
    U: float = INLET_VELOCITY,
    box_ratio: float = 1.0,
    labels: Optional[Sequence[str]] = None,
) -> MultiBlockMesh:
    """
    Body-fitted channel around one or more circular cylinders.

    Four O-blocks fill the ring between each cylinder and a square box of
    half-width ``box_ratio * diameter``. The box edges cut the channel into
    a tensor grid of axis-aligned cells; every cell that is not a box
    becomes a block. In each O-block j = 0 lies on the cylinder and i runs
    clockwise around it. Blocks are numbered ring by ring, then the channel
    cells row by row from the inlet-side bottom corner.

    Args:
        centers: cylinder centres (x, y)
        diameters: one diameter per centre
        resolution: one of ``CYLINDER_RESOLUTIONS``
        box_ratio: box half-width over diameter
        labels: patch label per cylinder; ``"cylinder"`` for a single body
            and ``"cylinder0"``, ``"cylinder1"``, ... otherwise

    Raises:
        GeometryError: unknown resolution, bad diameters, a cylinder too close
            to the channel walls or boxes that neither line up nor stay apart
        DegenerateMeshError: a block folds over itself
    """
    if resolution not in CYLINDER_RESOLUTIONS:
        raise GeometryError(f"Unknown resolution {resolution!r}; choose from {sorted(CYLINDER_RESOLUTIONS)}")
    if not centers or len(centers) != len(diameters):
        raise GeometryError(
            f"Need one diameter per cylinder, got {len(centers)} centre(s) and {len(diameters)} diameter(s)"
        )
    if not all(d > 0 for d in diameters) or not box_ratio > 0.5:
        raise GeometryError(f"Diameters must be positive and box_ratio above 0.5, got {list(diameters)}, {box_ratio}")
    if labels is None:
        labels = ["cylinder"] if len(centers) == 1 else [f"cylinder{k}" for k in range(len(centers))]
    preset = CYLINDER_RESOLUTIONS[resolution]
    n_theta, n_radial, nx_right = preset["n_theta"], preset["n_radial"], preset["nx_right"]

    bodies = [(float(c[0]), float(c[1]), float(d), box_ratio * float(d)) for c, d in zip(centers, diameters)]
    h = min(2 * a / (n_theta - 1) for _, _, _, a in bodies)
    for cx, cy, d, a in bodies:
        gaps = {"left": cx - a, "bottom": cy - a, "top": height - (cy + a), "right": length - (cx + a)}
        tight = {name: gap for name, gap in gaps.items() if gap < 2 * h}
        if tight:
            error_msg = f"Cylinder at ({cx}, {cy}) with D={d} leaves less than two cells of clearance: {tight}"
            logger.error(error_msg)
            raise GeometryError(error_msg)

    columns, box_col = _partition([(cx - a, cx + a) for cx, _, _, a in bodies], length, h, "x")
    rows, box_row = _partition([(cy - a, cy + a) for _, cy, _, a in bodies], height, h, "y")
    boxes = list(zip(box_col, box_row))
    if len(set(boxes)) != len(boxes):
        raise GeometryError("Two cylinders share the same box")

    def nodes(lo: float, hi: float, box: bool, last: bool) -> int:
        if box:
            return n_theta
        if last:
            return nx_right
        return max(3, int(round((hi - lo) / h)) + 1)

    last = len(columns) - 1
    x_cols = [_uniform(lo, hi, nodes(lo, hi, k in box_col, k == last)) for k, (lo, hi) in enumerate(columns)]
    y_rows = [_uniform(lo, hi, nodes(lo, hi, k in box_row, False)) for k, (lo, hi) in enumerate(rows)]

    blocks: List[np.ndarray] = []
    for cx, cy, d, a in bodies:
        blocks += _ring_blocks(cx, cy, d, a, n_theta, n_radial)
    channel_index: Dict[Tuple[int, int], int] = {}
    for row in range(len(rows)):
        for col in range(len(columns)):
            if (col, row) in boxes:
                continue
            channel_index[(col, row)] = len(blocks)
            blocks.append(_grid_block(x_cols[col], y_rows[row]))

    interfaces: List[Interface] = []
    for k, (col, row) in enumerate(boxes):
        ring = 4 * k
        interfaces += [
            Interface(block_a=ring + q, side_a=Side.I_MAX, block_b=ring + (q + 1) % 4, side_b=Side.I_MIN)
            for q in range(4)
        ]
        interfaces += [
            Interface(block_a=ring, side_a=Side.J_MAX, block_b=channel_index[(col, row - 1)], side_b=Side.J_MAX,
                      orientation=Orientation.REVERSED),
            Interface(block_a=ring + 1, side_a=Side.J_MAX, block_b=channel_index[(col - 1, row)], side_b=Side.I_MAX),
            Interface(block_a=ring + 2, side_a=Side.J_MAX, block_b=channel_index[(col, row + 1)], side_b=Side.J_MIN),
            Interface(block_a=ring + 3, side_a=Side.J_MAX, block_b=channel_index[(col + 1, row)], side_b=Side.I_MIN,
                      orientation=Orientation.REVERSED),
        ]
    for (col, row), b in channel_index.items():
        if (col + 1, row) in channel_index:
            interfaces.append(
                Interface(block_a=b, side_a=Side.I_MAX, block_b=channel_index[(col + 1, row)], side_b=Side.I_MIN)
            )
        if (col, row + 1) in channel_index:
            interfaces.append(
                Interface(block_a=b, side_a=Side.J_MAX, block_b=channel_index[(col, row + 1)], side_b=Side.J_MIN)
            )

    top = len(rows) - 1
    inlet = _parabolic_inlet(U, height)
    boundaries = [
        BoundaryPatch(block=channel_index[(0, row)], side=Side.I_MIN, kind=PatchKind.INLET, value=inlet)
        for row in range(len(rows))
    ]
    for col in range(len(columns)):
        ni = len(x_cols[col])
        wall_range = (1, ni - 1) if col == 0 else (0, ni - 1)
        boundaries.append(
            BoundaryPatch(block=channel_index[(col, 0)], side=Side.J_MIN, range=wall_range, kind=PatchKind.WALL)
        )
        boundaries.append(
            BoundaryPatch(block=channel_index[(col, top)], side=Side.J_MAX, range=wall_range, kind=PatchKind.WALL)
        )
    for row in range(len(rows)):
        nj = len(y_rows[row])
        out_range = (1 if row == 0 else 0, nj - 2 if row == top else nj - 1)
        boundaries.append(
            BoundaryPatch(block=channel_index[(last, row)], side=Side.I_MAX, range=out_range, kind=PatchKind.OUTLET)
        )
    for k, label in enumerate(labels):
        boundaries += [
            BoundaryPatch(block=4 * k + q, side=Side.J_MIN, kind=PatchKind.WALL, label=label) for q in range(4)
        ]

    mesh = MultiBlockMesh(tuple(Block(c) for c in blocks), tuple(interfaces), tuple(boundaries))
    mesh = _snap_interfaces(mesh)
    check_orientation(mesh)
    check_mesh(mesh)
    logger.info(
        f"Generated {resolution} channel around {len(bodies)} cylinder(s): "
        f"{len(mesh.blocks)} blocks, {mesh.n_nodes} nodes"
    )
    return mesh


def generate_cylinder_channel(
    center: Sequence[float] = (0.2, 0.2),
    diameter: float = 0.1,
    resolution: str = "coarse",
    length: float = CHANNEL_LENGTH,
    height: float = CHANNEL_HEIGHT,
    U: float = INLET_VELOCITY,
) -> MultiBlockMesh:
    """
    Channel around a single cylinder: 12 blocks, a box of half-width
    ``diameter``, the body patch labelled ``"cylinder"``.
    """
    return generate_cylinders_channel([center], [diameter], resolution, length, height, U)


def generate_double_cylinder_channel(
    centers: Sequence[Sequence[float]] = DOUBLE_CYLINDER_CENTERS,
    diameters: Sequence[float] = DOUBLE_CYLINDER_DIAMETERS,
    resolution: str = "coarse",
    length: float = CHANNEL_LENGTH,
    height: float = CHANNEL_HEIGHT,
    U: float = INLET_VELOCITY,
) -> MultiBlockMesh:
    """
    Channel around two staggered cylinders of different size: 31 blocks,
    body patches ``"cylinder0"`` and ``"cylinder1"``. The boxes are
    narrower than the single-cylinder one so they stay apart in x and y.
    """
    return generate_cylinders_channel(centers, diameters, resolution, length, height, U, box_ratio=DOUBLE_CYLINDER_BOX)

# ==============================================================================
# Block splitting


def _relocate(node: Tuple[int, int], block: int, i_split: int, new_block: int) -> List[Tuple[int, Tuple[int, int]]]:
    """Copies of a node of the split block: the column i_split lives in both halves"""
    i, j = node
    copies = []
    if i <= i_split:
        copies.append((block, (i, j)))
    if i >= i_split:
        copies.append((new_block, (i - i_split, j)))
    return copies


def _side_after_split(side: Side, owner: int, block: int, new_block: int) -> Optional[int]:
    """Owner block of an i-side after the split; None for j-sides, which are cut"""
    if owner != block:
        return owner
    if side == Side.I_MIN:
        return block
    if side == Side.I_MAX:
        return new_block
    return None


def _position(side: Side, node: Tuple[int, int]) -> int:
    return node[1] if side.axis == 0 else node[0]


def _split_interface(
    mesh: MultiBlockMesh, iface: Interface, block: int, i_split: int, new_block: int
) -> List[Interface]:
    owner_a = _side_after_split(iface.side_a, iface.block_a, block, new_block)
    owner_b = _side_after_split(iface.side_b, iface.block_b, block, new_block)
    if owner_a is not None and owner_b is not None:
        return [iface.model_copy(update={"block_a": owner_a, "block_b": owner_b})]
    if owner_a is None and owner_b is None:
        raise MeshError(f"Cannot split block {block}: it is glued to itself along a j side")

    portions: Dict[Tuple[int, int], List[Tuple[Tuple[int, int], Tuple[int, int]]]] = {}
    for node_a, node_b in mesh.interface_pairs(iface):
        copies_a = (
            _relocate(node_a, block, i_split, new_block) if owner_a is None else [(owner_a, _shift(node_a, iface.side_a, iface.block_a, block, i_split))]
        )
        copies_b = (
            _relocate(node_b, block, i_split, new_block) if owner_b is None else [(owner_b, _shift(node_b, iface.side_b, iface.block_b, block, i_split))]
        )
        for blk_a, na in copies_a:
            for blk_b, nb in copies_b:
                portions.setdefault((blk_a, blk_b), []).append((na, nb))

    pieces = []
    for (blk_a, blk_b), pairs in portions.items():
        pos_a = [_position(iface.side_a, na) for na, _ in pairs]
        pos_b = [_position(iface.side_b, nb) for _, nb in pairs]
        reversed_b = len(pos_b) > 1 and pos_b[1] < pos_b[0]
        pieces.append(
            Interface(
                block_a=blk_a,
                side_a=iface.side_a,
                block_b=blk_b,
                side_b=iface.side_b,
                range_a=(min(pos_a), max(pos_a)),
                range_b=(min(pos_b), max(pos_b)),
                orientation=Orientation.REVERSED if reversed_b else Orientation.ALIGNED,
            )
        )
    return pieces


def _shift(node: Tuple[int, int], side: Side, owner: int, block: int, i_split: int) -> Tuple[int, int]:
    # the i_max side of the split block moves to the right half
    if owner == block and side == Side.I_MAX:
        return (node[0] - i_split, node[1])
    return node


def split_block(mesh: MultiBlockMesh, block: int, i_split: int) -> MultiBlockMesh:
    """
    Split one block along the line i = i_split into two blocks joined by an interface.

    The left half keeps the block index; the right half is appended as the
    last block. Interfaces and patches touching the block are re-targeted,
    and the pressure anchor follows its node.

    Raises:
        MeshError: either half would have fewer than 3 i-nodes
    """
    source = mesh.blocks[block]
    if not 2 <= i_split <= source.ni - 3:
        raise MeshError(f"Split at i={i_split} leaves a block of block {block} ({source.ni} wide) too narrow")

    new_block = len(mesh.blocks)
    blocks = list(mesh.blocks)
    blocks[block] = Block(source.coords[: i_split + 1])
    blocks.append(Block(source.coords[i_split:]))

    interfaces: List[Interface] = []
    for iface in mesh.interfaces:
        if block in (iface.block_a, iface.block_b):
            interfaces.extend(_split_interface(mesh, iface, block, i_split, new_block))
        else:
            interfaces.append(iface)
    interfaces.append(Interface(block_a=block, side_a=Side.I_MAX, block_b=new_block, side_b=Side.I_MIN))

    boundaries: List[BoundaryPatch] = []
    for patch in mesh.boundaries:
        if patch.block != block:
            boundaries.append(patch)
        elif patch.side == Side.I_MIN:
            boundaries.append(patch)
        elif patch.side == Side.I_MAX:
            boundaries.append(patch.model_copy(update={"block": new_block}))
        else:
            start, end = patch.range if patch.range is not None else (0, source.ni - 1)
            if start <= i_split:
                boundaries.append(patch.model_copy(update={"range": (start, min(end, i_split))}))
            if end >= i_split:
                boundaries.append(
                    patch.model_copy(update={"block": new_block, "range": (max(start, i_split) - i_split, end - i_split)})
                )

    anchor = mesh.pressure_anchor
    if anchor is not None and anchor[0] == block and anchor[1] > i_split:
        anchor = (new_block, anchor[1] - i_split, anchor[2])

    split = MultiBlockMesh(tuple(blocks), tuple(interfaces), tuple(boundaries), anchor)
    logger.debug(f"Split block {block} at i={i_split} into blocks {block} and {new_block}")
    return split


GENERATORS = {
    "cavity": generate_cavity,
    "channel": generate_channel,
    "cylinder": generate_cylinder_channel,
    "double_cylinder": generate_double_cylinder_channel,
}
