"""
Two-dimensional block-structured grids.

A mesh is a list of logically rectangular blocks, the interfaces that glue
block sides together (adjacent blocks share their interface nodes), and the
boundary patches that tag the remaining sides with a flow-boundary kind.
Within a block node (i, j) is stored at ``coords[i, j]``; flat orderings
are row-major with j outer and i inner, and blocks are concatenated in
file order.
"""

import enum
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from gcfdm.config import settings
from gcfdm.errors import (
    CoverageError,
    InterfaceMismatchError,
    MeshError,
    MeshParseError,
)
from gcfdm.storage import write_file

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Side(str, enum.Enum):
    I_MIN = "i_min"
    I_MAX = "i_max"
    J_MIN = "j_min"
    J_MAX = "j_max"

    @property
    def axis(self) -> int:
        """Index axis normal to the side: 0 for xi, 1 for eta"""
        return 0 if self in (Side.I_MIN, Side.I_MAX) else 1

    @property
    def sign(self) -> int:
        """+1 if the outward direction increases the index"""
        return 1 if self in (Side.I_MAX, Side.J_MAX) else -1


class Orientation(str, enum.Enum):
    ALIGNED = "aligned"
    REVERSED = "reversed"


class PatchKind(str, enum.Enum):
    WALL = "wall"
    MOVING_LID = "moving_lid"
    INLET = "inlet"
    OUTLET = "outlet"


class NodeType(enum.IntEnum):
    INTERIOR = 0
    WALL = 1
    MOVING_LID = 2
    INLET = 3
    OUTLET = 4
    SIZE = 5


PATCH_NODE_TYPE = {
    PatchKind.WALL: NodeType.WALL,
    PatchKind.MOVING_LID: NodeType.MOVING_LID,
    PatchKind.INLET: NodeType.INLET,
    PatchKind.OUTLET: NodeType.OUTLET,
}

DIRICHLET_TYPES = (NodeType.WALL, NodeType.MOVING_LID, NodeType.INLET)


@dataclass(frozen=True, eq=False)
class Block:
    """One curvilinear block; ``coords`` has shape (ni, nj, 2)"""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise MeshError(f"Block coordinates must have shape (ni, nj, 2), got {coords.shape}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def ni(self) -> int:
        return self.coords.shape[0]

    @property
    def nj(self) -> int:
        return self.coords.shape[1]

    @property
    def size(self) -> int:
        return self.ni * self.nj

    def side_length(self, side: Side) -> int:
        return self.nj if side.axis == 0 else self.ni

    def side_nodes(self, side: Side, index_range: Optional[Tuple[int, int]] = None) -> List[Tuple[int, int]]:
        """(i, j) pairs along a side in increasing along-side index"""
        start, end = index_range if index_range is not None else (0, self.side_length(side) - 1)
        positions = range(start, end + 1)
        if side == Side.I_MIN:
            return [(0, k) for k in positions]
        if side == Side.I_MAX:
            return [(self.ni - 1, k) for k in positions]
        if side == Side.J_MIN:
            return [(k, 0) for k in positions]
        return [(k, self.nj - 1) for k in positions]

    def flat_coords(self) -> np.ndarray:
        """(ni*nj, 2) coordinates, j outer and i inner"""
        return self.coords.transpose(1, 0, 2).reshape(-1, 2)


class BoundaryValue(BaseModel):
    """Dirichlet data: a constant vector or a parabolic inlet profile"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    u: float = 0.0
    v: float = 0.0
    profile: Optional[str] = None
    U: Optional[float] = None
    height: float = 0.41
    y0: float = 0.0


class Interface(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_a: int
    side_a: Side
    block_b: int
    side_b: Side
    range_a: Optional[Tuple[int, int]] = None
    range_b: Optional[Tuple[int, int]] = None
    orientation: Orientation = Orientation.ALIGNED


class BoundaryPatch(BaseModel):
    model_config = ConfigDict(frozen=True)

    block: int
    side: Side
    range: Optional[Tuple[int, int]] = None
    kind: PatchKind
    value: Optional[BoundaryValue] = None
    label: Optional[str] = None


class Topology(BaseModel):
    """Schema of the sibling topology JSON file"""

    interfaces: List[Interface] = []
    boundaries: List[BoundaryPatch] = []
    pressure_anchor: Optional[Tuple[int, int, int]] = None


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    block: int
    side: Optional[str]
    node: Optional[Tuple[int, int]]
    message: str

    def as_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "block": self.block,
            "side": self.side,
            "node": list(self.node) if self.node is not None else None,
            "message": self.message,
        }


@dataclass(frozen=True, eq=False)
class MultiBlockMesh:
    blocks: Tuple[Block, ...]
    interfaces: Tuple[Interface, ...] = ()
    boundaries: Tuple[BoundaryPatch, ...] = ()
    pressure_anchor: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "interfaces", tuple(self.interfaces))
        object.__setattr__(self, "boundaries", tuple(self.boundaries))

    @cached_property
    def block_offsets(self) -> np.ndarray:
        sizes = [b.size for b in self.blocks]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def n_block_nodes(self) -> int:
        """Sum of per-block node counts (interface nodes counted per block)"""
        return int(self.block_offsets[-1])

    def raw_index(self, block: int, i: int, j: int) -> int:
        return int(self.block_offsets[block]) + j * self.blocks[block].ni + i

    def raw_coords(self) -> np.ndarray:
        return np.concatenate([b.flat_coords() for b in self.blocks], axis=0)

    def interface_pairs(self, iface: Interface) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
        """Matched ((i_a, j_a), (i_b, j_b)) node pairs of one interface"""
        nodes_a = self.blocks[iface.block_a].side_nodes(iface.side_a, iface.range_a)
        nodes_b = self.blocks[iface.block_b].side_nodes(iface.side_b, iface.range_b)
        if iface.orientation == Orientation.REVERSED:
            nodes_b = nodes_b[::-1]
        if len(nodes_a) != len(nodes_b):
            raise MeshError(
                f"Interface between blocks {iface.block_a} and {iface.block_b} "
                f"matches {len(nodes_a)} nodes against {len(nodes_b)}"
            )
        return list(zip(nodes_a, nodes_b))

    @cached_property
    def physical_index(self) -> np.ndarray:
        """Map from raw block-node index to deduplicated physical node index"""
        parent = np.arange(self.n_block_nodes)

        def find(k):
            while parent[k] != k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        for iface in self.interfaces:
            for (ia, ja), (ib, jb) in self.interface_pairs(iface):
                ra = find(self.raw_index(iface.block_a, ia, ja))
                rb = find(self.raw_index(iface.block_b, ib, jb))
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)

        mapping = np.empty(self.n_block_nodes, dtype=np.int64)
        root_ids: Dict[int, int] = {}
        for k in range(self.n_block_nodes):
            root = find(k)
            if root not in root_ids:
                root_ids[root] = len(root_ids)
            mapping[k] = root_ids[root]
        return mapping

    @property
    def n_nodes(self) -> int:
        """|V_phy|: shared interface nodes counted once"""
        return int(self.physical_index.max()) + 1 if self.n_block_nodes else 0

    def physical_coords(self) -> np.ndarray:
        # first occurrence wins so interface nodes take the lower block's copy
        _, first = np.unique(self.physical_index, return_index=True)
        return self.raw_coords()[first]

    def patch_nodes(self, patch: BoundaryPatch) -> List[Tuple[int, int]]:
        return self.blocks[patch.block].side_nodes(patch.side, patch.range)

    @cached_property
    def node_types(self) -> np.ndarray:
        """Per physical node type; interface nodes on a flow boundary take the boundary type"""
        types = np.full(self.n_nodes, int(NodeType.INTERIOR), dtype=np.int64)
        assigned = np.zeros(self.n_nodes, dtype=bool)
        for patch in self.boundaries:
            node_type = PATCH_NODE_TYPE[patch.kind]
            for i, j in self.patch_nodes(patch):
                k = self.physical_index[self.raw_index(patch.block, i, j)]
                if not assigned[k]:
                    types[k] = int(node_type)
                    assigned[k] = True
        return types

    def node_patches(self) -> List[Optional[BoundaryPatch]]:
        """The patch that decided each physical node's type (None for interior)"""
        owner: List[Optional[BoundaryPatch]] = [None] * self.n_nodes
        for patch in self.boundaries:
            for i, j in self.patch_nodes(patch):
                k = self.physical_index[self.raw_index(patch.block, i, j)]
                if owner[k] is None:
                    owner[k] = patch
        return owner

    def anchor_node(self) -> Optional[int]:
        if self.pressure_anchor is None:
            return None
        b, i, j = self.pressure_anchor
        return int(self.physical_index[self.raw_index(b, i, j)])

    def topology(self) -> Topology:
        return Topology(
            interfaces=list(self.interfaces),
            boundaries=list(self.boundaries),
            pressure_anchor=self.pressure_anchor,
        )


# ==============================================================================
# Validation


def validate_topology(mesh: MultiBlockMesh, tolerance: Optional[float] = None) -> List[Diagnostic]:
    """
    List every invariant violation of a mesh; an empty list means the mesh is valid.
    """
    tolerance = settings.INTERFACE_TOLERANCE if tolerance is None else tolerance
    report: List[Diagnostic] = []
    n_blocks = len(mesh.blocks)

    for b, block in enumerate(mesh.blocks):
        if block.ni < 3 or block.nj < 3:
            report.append(
                Diagnostic("size", b, None, None, f"block {b} is {block.ni}x{block.nj}; need at least 3x3")
            )
        if not np.all(np.isfinite(block.coords)):
            report.append(Diagnostic("finite", b, None, None, f"block {b} has non-finite coordinates"))
        flat = block.flat_coords()
        unique = np.unique(flat, axis=0)
        if unique.shape[0] != flat.shape[0]:
            report.append(
                Diagnostic(
                    "duplicate",
                    b,
                    None,
                    None,
                    f"block {b} repeats {flat.shape[0] - unique.shape[0]} node position(s)",
                )
            )

    covered = set()
    for n, iface in enumerate(mesh.interfaces):
        if not (0 <= iface.block_a < n_blocks and 0 <= iface.block_b < n_blocks):
            report.append(Diagnostic("interface", iface.block_a, None, None, f"interface {n} names a missing block"))
            continue
        try:
            pairs = mesh.interface_pairs(iface)
        except (MeshError, IndexError) as e:
            report.append(Diagnostic("interface", iface.block_a, iface.side_a.value, None, str(e)))
            continue
        coords_a = mesh.blocks[iface.block_a].coords
        coords_b = mesh.blocks[iface.block_b].coords
        for (ia, ja), (ib, jb) in pairs:
            gap = float(np.max(np.abs(coords_a[ia, ja] - coords_b[ib, jb])))
            if not gap <= tolerance:
                report.append(
                    Diagnostic(
                        "mismatch",
                        iface.block_a,
                        iface.side_a.value,
                        (ia, ja),
                        f"interface {n}: node ({ia},{ja}) of block {iface.block_a} and "
                        f"({ib},{jb}) of block {iface.block_b} differ by {gap:.3e}",
                    )
                )
            covered.add((iface.block_a, ia, ja))
            covered.add((iface.block_b, ib, jb))

    per_side: Dict[Tuple[int, Side], List[Tuple[int, int]]] = {}
    for patch in mesh.boundaries:
        if not 0 <= patch.block < n_blocks:
            report.append(Diagnostic("patch", patch.block, patch.side.value, None, "patch names a missing block"))
            continue
        block = mesh.blocks[patch.block]
        start, end = patch.range if patch.range is not None else (0, block.side_length(patch.side) - 1)
        if not 0 <= start <= end < block.side_length(patch.side):
            report.append(
                Diagnostic("patch", patch.block, patch.side.value, None, f"patch range {start}..{end} out of bounds")
            )
            continue
        for earlier in per_side.get((patch.block, patch.side), []):
            if start <= earlier[1] and earlier[0] <= end:
                report.append(
                    Diagnostic(
                        "overlap",
                        patch.block,
                        patch.side.value,
                        None,
                        f"patches {earlier[0]}..{earlier[1]} and {start}..{end} overlap",
                    )
                )
        per_side.setdefault((patch.block, patch.side), []).append((start, end))
        for i, j in block.side_nodes(patch.side, (start, end)):
            covered.add((patch.block, i, j))

    for b, block in enumerate(mesh.blocks):
        if block.ni < 1 or block.nj < 1:
            continue
        for side in Side:
            missing = [(i, j) for i, j in block.side_nodes(side) if (b, i, j) not in covered]
            if missing:
                report.append(
                    Diagnostic(
                        "coverage",
                        b,
                        side.value,
                        missing[0],
                        f"block {b} side {side.value} has {len(missing)} node(s) without interface or patch",
                    )
                )

    if mesh.pressure_anchor is not None:
        b, i, j = mesh.pressure_anchor
        if not (0 <= b < n_blocks and 0 <= i < mesh.blocks[b].ni and 0 <= j < mesh.blocks[b].nj):
            report.append(Diagnostic("anchor", b, None, (i, j), "pressure anchor outside the mesh"))

    for entry in report:
        logger.debug(f"validate_topology: {entry.message}")
    return report


def check_mesh(mesh: MultiBlockMesh) -> MultiBlockMesh:
    """Raise the most specific error for the first class of violation found"""
    report = validate_topology(mesh)
    if not report:
        return mesh
    for kind, error in (("mismatch", InterfaceMismatchError), ("coverage", CoverageError)):
        hits = [d for d in report if d.kind == kind]
        if hits:
            logger.error(hits[0].message)
            raise error(hits[0].message)
    logger.error(report[0].message)
    raise MeshError(report[0].message)


# ==============================================================================
# File I/O


def topology_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".topo.json")


def _parse_blocks(tokens: List[str]) -> List[Block]:
    """Blocks from MBG tokens; ValueError or IndexError on malformed contents"""
    blocks = []
    cursor = 0
    n_blocks = int(tokens[cursor])
    cursor += 1
    for _ in range(n_blocks):
        ni, nj = int(tokens[cursor]), int(tokens[cursor + 1])
        cursor += 2
        count = ni * nj
        values = np.array([float(t) for t in tokens[cursor : cursor + 2 * count]], dtype=np.float64)
        if values.size != 2 * count:
            raise ValueError(f"block declares {count} nodes but file ends early")
        cursor += 2 * count
        blocks.append(Block(values.reshape(nj, ni, 2).transpose(1, 0, 2)))
    if cursor != len(tokens):
        raise ValueError(f"{len(tokens) - cursor} trailing tokens")
    return blocks


def load_mesh(path: PathLike, check: bool = True) -> MultiBlockMesh:
    """
    Read an MBG mesh file and its sibling ``<stem>.topo.json`` topology file.

    Args:
        check: validate the mesh before returning it; ``mesh validate``
            turns this off to list every diagnostic itself

    Raises:
        MeshParseError: unreadable or malformed mesh or topology file
        InterfaceMismatchError: interface nodes do not coincide
        CoverageError: a block side has neither an interface nor a patch
    """
    path = Path(path)
    topo_file = topology_path(path)
    try:
        blocks = _parse_blocks(path.read_text().split())
        topology = Topology.model_validate_json(topo_file.read_text())
    except OSError as e:
        error_msg = f"Cannot read mesh {path}: {str(e)}"
        logger.error(error_msg)
        raise MeshParseError(error_msg)
    except ValidationError as e:
        error_msg = f"{topo_file}: invalid topology ({str(e)})"
        logger.error(error_msg)
        raise MeshParseError(error_msg)
    except (ValueError, IndexError, MeshError) as e:
        error_msg = f"{path}: malformed mesh file ({str(e)})"
        logger.error(error_msg)
        raise MeshParseError(error_msg)

    mesh = MultiBlockMesh(
        blocks=tuple(blocks),
        interfaces=tuple(topology.interfaces),
        boundaries=tuple(topology.boundaries),
        pressure_anchor=topology.pressure_anchor,
    )
    logger.info(f"Loaded {path}: {len(blocks)} block(s), {len(topology.interfaces)} interface(s)")
    return check_mesh(mesh) if check else mesh


def save_mesh(mesh: MultiBlockMesh, path: PathLike) -> Tuple[Path, Path]:
    """Write the MBG file and its topology JSON; floats use round-trip formatting"""
    path = Path(path)
    lines = [str(len(mesh.blocks))]
    for block in mesh.blocks:
        lines.append(f"{block.ni} {block.nj}")
        lines.extend(f"{x!r} {y!r}" for x, y in block.flat_coords().tolist())
    write_file(path, "\n".join(lines) + "\n")
    topo_file = write_file(topology_path(path), mesh.topology().model_dump_json(indent=2) + "\n")
    return path, topo_file


def describe(mesh: MultiBlockMesh) -> Dict:
    """Summary used by ``mesh info``"""
    kinds = np.bincount(mesh.node_types, minlength=int(NodeType.SIZE))
    return {
        "blocks": [{"ni": b.ni, "nj": b.nj} for b in mesh.blocks],
        "interfaces": len(mesh.interfaces),
        "patches": len(mesh.boundaries),
        "block_nodes": mesh.n_block_nodes,
        "physical_nodes": mesh.n_nodes,
        "node_types": {NodeType(k).name.lower(): int(kinds[k]) for k in range(int(NodeType.SIZE))},
        "pressure_anchor": list(mesh.pressure_anchor) if mesh.pressure_anchor else None,
    }
