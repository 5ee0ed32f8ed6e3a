"""
The two graphs built over a mesh.

``PhysGraph`` is the connected physical-space graph the network sees:
shared interface nodes appear once, grid edges appear in both directions
and quad cells carry their counterclockwise directed edges.

``CompGraph`` is the block-separated computational graph the residual
engine works on. Its nodes are the block nodes in file order, so
``index_block`` maps each one to its physical node. For every node and
index direction it stores the minus and plus stencil neighbours: inside
the block, a halo node of the block across an interface, or -1 at a
physical boundary, where a one-sided closure takes over.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from gcfdm import autodiff as ad
from gcfdm.autodiff import Tensor
from gcfdm.errors import MeshError
from gcfdm.mesh import MultiBlockMesh, NodeType, PatchKind, Side

logger = logging.getLogger(__name__)

XI, ETA = 0, 1
MISSING = -1


@dataclass(frozen=True, eq=False)
class PhysGraph:
    n_nodes: int
    coords: np.ndarray
    node_type: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    cells: np.ndarray
    cell_edges: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])

    @property
    def n_cells(self) -> int:
        return int(self.cells.shape[0])

    @cached_property
    def cells_per_node(self) -> np.ndarray:
        """N_c for every node"""
        return np.bincount(self.cells.reshape(-1), minlength=self.n_nodes)


def build_physical_graph(mesh: MultiBlockMesh) -> PhysGraph:
    """Deduplicated node set, bidirectional grid edges and counterclockwise quad cells"""
    phys = mesh.physical_index
    undirected: Dict[Tuple[int, int], int] = {}
    cells = []
    for b, block in enumerate(mesh.blocks):
        ids = phys[mesh.block_offsets[b] : mesh.block_offsets[b + 1]].reshape(block.nj, block.ni)
        for j in range(block.nj):
            for i in range(block.ni):
                if i + 1 < block.ni:
                    key = tuple(sorted((int(ids[j, i]), int(ids[j, i + 1]))))
                    undirected.setdefault(key, len(undirected))
                if j + 1 < block.nj:
                    key = tuple(sorted((int(ids[j, i]), int(ids[j + 1, i]))))
                    undirected.setdefault(key, len(undirected))
        for j in range(block.nj - 1):
            for i in range(block.ni - 1):
                cells.append((ids[j, i], ids[j, i + 1], ids[j + 1, i + 1], ids[j + 1, i]))

    pairs = np.array(list(undirected.keys()), dtype=np.int64).reshape(-1, 2)
    senders = np.empty(2 * len(pairs), dtype=np.int64)
    receivers = np.empty(2 * len(pairs), dtype=np.int64)
    senders[0::2], receivers[0::2] = pairs[:, 0], pairs[:, 1]
    senders[1::2], receivers[1::2] = pairs[:, 1], pairs[:, 0]
    edge_id = {(int(s), int(r)): k for k, (s, r) in enumerate(zip(senders, receivers))}

    cells = np.array(cells, dtype=np.int64).reshape(-1, 4)
    cell_edges = np.array(
        [[edge_id[(int(c[k]), int(c[(k + 1) % 4]))] for k in range(4)] for c in cells], dtype=np.int64
    ).reshape(-1, 4)

    graph = PhysGraph(
        n_nodes=mesh.n_nodes,
        coords=mesh.physical_coords(),
        node_type=mesh.node_types.copy(),
        senders=senders,
        receivers=receivers,
        cells=cells,
        cell_edges=cell_edges,
    )
    logger.debug(f"Physical graph: {graph.n_nodes} nodes, {graph.n_edges} edges, {graph.n_cells} cells")
    return graph


@dataclass(frozen=True, eq=False)
class DifferenceOperator:
    """
    A fixed-weight linear stencil as a message list: out[dst] += weight * in[src].

    ``src_axis`` and ``sign`` are only used for flux inputs, where a halo
    message reads the neighbour block's flux along its own axis and may
    flip it.
    """

    src: np.ndarray
    src_axis: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    sign: np.ndarray

    def flux_rows(self, n: int) -> np.ndarray:
        return self.src_axis * n + self.src

    def apply(self, values: np.ndarray, n: int) -> np.ndarray:
        """Plain numpy application to scalar node data of shape (n,) or (n, c)"""
        values = np.asarray(values, dtype=np.float64)
        out = np.zeros((n,) + values.shape[1:], dtype=np.float64)
        w = self.weight.reshape((-1,) + (1,) * (values.ndim - 1))
        np.add.at(out, self.dst, w * values[self.src])
        return out


@dataclass(frozen=True, eq=False)
class CompGraph:
    n_nodes: int
    n_phys: int
    index_block: np.ndarray
    block_of: np.ndarray
    ij: np.ndarray
    minus: np.ndarray
    plus: np.ndarray
    minus_axis: np.ndarray
    plus_axis: np.ndarray
    minus_sign: np.ndarray
    plus_sign: np.ndarray
    node_type: np.ndarray
    n_block_edges: int
    normal: np.ndarray = field(repr=False)

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.index_block, minlength=self.n_phys)

    @cached_property
    def duplicate_groups(self) -> List[np.ndarray]:
        """G_com copies of every physical node shared by more than one block"""
        order = np.argsort(self.index_block, kind="stable")
        bounds = np.cumsum(self.counts)[:-1]
        return [g for g in np.split(order, bounds) if g.size > 1]

    @property
    def dirichlet(self) -> np.ndarray:
        """Boolean mask of G_com nodes whose velocity is prescribed"""
        return np.isin(self.node_type, [int(t) for t in (NodeType.WALL, NodeType.MOVING_LID, NodeType.INLET)])

    @property
    def outlet(self) -> np.ndarray:
        return self.node_type == int(NodeType.OUTLET)

    def closure_nodes(self, direction: int) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes missing their minus and their plus neighbour in ``direction``"""
        return (
            np.flatnonzero(self.minus[:, direction] == MISSING),
            np.flatnonzero(self.plus[:, direction] == MISSING),
        )

    def _closure_messages(self, direction: int):
        """One-sided second-order messages (-3 f0 + 4 f1 - f2)/2 and its mirror"""
        low, high = self.closure_nodes(direction)
        src, dst, weight = [], [], []
        for nodes, near, coeffs in ((low, self.plus, (-1.5, 2.0, -0.5)), (high, self.minus, (1.5, -2.0, 0.5))):
            if nodes.size == 0:
                continue
            first = near[nodes, direction]
            second = near[first, direction]
            if np.any(first == MISSING) or np.any(second == MISSING):
                raise MeshError("Block too thin for a one-sided closure")
            for hop, c in zip((nodes, first, second), coeffs):
                src.append(hop)
                dst.append(nodes)
                weight.append(np.full(nodes.size, c))
        return src, dst, weight

    @cached_property
    def _central(self) -> Tuple[DifferenceOperator, DifferenceOperator]:
        ops = []
        for d in (XI, ETA):
            full = np.flatnonzero((self.minus[:, d] != MISSING) & (self.plus[:, d] != MISSING))
            src = [self.plus[full, d], self.minus[full, d]]
            axis = [self.plus_axis[full, d], self.minus_axis[full, d]]
            sign = [self.plus_sign[full, d], self.minus_sign[full, d]]
            dst = [full, full]
            weight = [np.full(full.size, 0.5), np.full(full.size, -0.5)]
            c_src, c_dst, c_weight = self._closure_messages(d)
            src += c_src
            dst += c_dst
            weight += c_weight
            # closures stay inside the block, so the flux axis is the direction itself
            axis += [np.full(s.size, d) for s in c_src]
            sign += [np.ones(s.size) for s in c_src]
            ops.append(
                DifferenceOperator(
                    src=np.concatenate(src).astype(np.int64),
                    src_axis=np.concatenate(axis).astype(np.int64),
                    dst=np.concatenate(dst).astype(np.int64),
                    weight=np.concatenate(weight),
                    sign=np.concatenate(sign),
                )
            )
        return tuple(ops)

    def central_operator(self, direction: int) -> DifferenceOperator:
        return self._central[direction]

    @cached_property
    def _half_edges(self):
        """
        Per direction: stencil edges (node, neighbour) with an edge-to-node
        weight of +1 toward the plus neighbour and -1 toward the minus one,
        plus the closure messages for nodes without a full stencil.
        """
        edges = []
        for d in (XI, ETA):
            full = np.flatnonzero((self.minus[:, d] != MISSING) & (self.plus[:, d] != MISSING))
            node = np.concatenate([full, full])
            nbr = np.concatenate([self.plus[full, d], self.minus[full, d]])
            nbr_axis = np.concatenate([self.plus_axis[full, d], self.minus_axis[full, d]])
            nbr_sign = np.concatenate([self.plus_sign[full, d], self.minus_sign[full, d]])
            to_node = np.concatenate([np.ones(full.size), -np.ones(full.size)])
            c_src, c_dst, c_weight = self._closure_messages(d)
            closure = DifferenceOperator(
                src=np.concatenate(c_src).astype(np.int64) if c_src else np.zeros(0, dtype=np.int64),
                src_axis=np.full(sum(s.size for s in c_src), d, dtype=np.int64),
                dst=np.concatenate(c_dst).astype(np.int64) if c_dst else np.zeros(0, dtype=np.int64),
                weight=np.concatenate(c_weight) if c_weight else np.zeros(0),
                sign=np.ones(sum(s.size for s in c_src)),
            )
            edges.append((node, nbr, nbr_axis, nbr_sign, to_node, closure))
        return tuple(edges)

    def half_edges(self, direction: int):
        return self._half_edges[direction]


def _inward(side: Side, node: Tuple[int, int]) -> Tuple[int, int]:
    i, j = node
    step = -side.sign
    return (i + step, j) if side.axis == 0 else (i, j + step)


def _outward_normal(mesh: MultiBlockMesh, b: int, side: Side) -> np.ndarray:
    """Unit outward normals of the nodes of one block side, from one-sided index derivatives"""
    coords = mesh.blocks[b].coords
    if side.axis == 0:
        line = coords[0] if side == Side.I_MIN else coords[-1]
        inner = coords[1] if side == Side.I_MIN else coords[-2]
    else:
        line = coords[:, 0] if side == Side.J_MIN else coords[:, -1]
        inner = coords[:, 1] if side == Side.J_MIN else coords[:, -2]
    tangent = np.gradient(line, axis=0, edge_order=2)
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=-1)
    # pick the direction pointing away from the block interior
    flip = np.sum(normal * (line - inner), axis=1) < 0
    normal[flip] *= -1
    return normal / np.linalg.norm(normal, axis=1, keepdims=True)


def to_computational_graph(pg: PhysGraph, mesh: MultiBlockMesh) -> CompGraph:
    """
    Separate the blocks at every interface and install halo stencil neighbours.

    A node on side S_a glued to side S_b of another block reads, across the
    interface, the first node inward from S_b. Fluxes read there are taken
    along the neighbour block's axis normal to S_b and multiplied by
    sigma_a * (-sigma_b), where sigma is +1 for i_max/j_max sides.
    """
    n = mesh.n_block_nodes
    offsets = mesh.block_offsets
    block_of = np.empty(n, dtype=np.int64)
    ij = np.empty((n, 2), dtype=np.int64)
    minus = np.full((n, 2), MISSING, dtype=np.int64)
    plus = np.full((n, 2), MISSING, dtype=np.int64)
    minus_axis = np.tile(np.array([XI, ETA], dtype=np.int64), (n, 1))
    plus_axis = minus_axis.copy()
    minus_sign = np.ones((n, 2))
    plus_sign = np.ones((n, 2))
    n_block_edges = 0

    for b, block in enumerate(mesh.blocks):
        ni, nj = block.ni, block.nj
        k = np.arange(offsets[b], offsets[b + 1])
        i, j = (k - offsets[b]) % ni, (k - offsets[b]) // ni
        block_of[k] = b
        ij[k, 0], ij[k, 1] = i, j
        minus[k, XI] = np.where(i > 0, k - 1, MISSING)
        plus[k, XI] = np.where(i < ni - 1, k + 1, MISSING)
        minus[k, ETA] = np.where(j > 0, k - ni, MISSING)
        plus[k, ETA] = np.where(j < nj - 1, k + ni, MISSING)
        n_block_edges += 2 * ((ni - 1) * nj + ni * (nj - 1))

    def install(blk: int, node, side: Side, other: int, other_node, other_side: Side) -> None:
        k = mesh.raw_index(blk, *node)
        hi, hj = _inward(other_side, other_node)
        halo = mesh.raw_index(other, hi, hj)
        d = side.axis
        table, axis_table, sign_table = (
            (plus, plus_axis, plus_sign) if side.sign > 0 else (minus, minus_axis, minus_sign)
        )
        if table[k, d] != MISSING and table[k, d] != halo:
            logger.warning(f"Node {node} of block {blk} already has a {side.value} neighbour; keeping the first")
            return
        table[k, d] = halo
        axis_table[k, d] = other_side.axis
        sign_table[k, d] = side.sign * -other_side.sign

    for iface in mesh.interfaces:
        for node_a, node_b in mesh.interface_pairs(iface):
            install(iface.block_a, node_a, iface.side_a, iface.block_b, node_b, iface.side_b)
            install(iface.block_b, node_b, iface.side_b, iface.block_a, node_a, iface.side_a)

    # outward unit normals of outlet nodes in their own block frame
    normal = np.zeros((n, 2))
    for patch in mesh.boundaries:
        if patch.kind != PatchKind.OUTLET:
            continue
        side_normals = _outward_normal(mesh, patch.block, patch.side)
        for (i, j) in mesh.patch_nodes(patch):
            position = j if patch.side.axis == 0 else i
            normal[mesh.raw_index(patch.block, i, j)] = side_normals[position]

    cg = CompGraph(
        n_nodes=n,
        n_phys=pg.n_nodes,
        index_block=mesh.physical_index.copy(),
        block_of=block_of,
        ij=ij,
        minus=minus,
        plus=plus,
        minus_axis=minus_axis,
        plus_axis=plus_axis,
        minus_sign=minus_sign,
        plus_sign=plus_sign,
        node_type=pg.node_type[mesh.physical_index],
        n_block_edges=n_block_edges,
        normal=normal,
    )
    if cg.n_nodes < cg.n_phys or (cg.n_nodes == cg.n_phys) != (len(mesh.blocks) == 1 or not mesh.interfaces):
        raise MeshError(f"|V_com| = {cg.n_nodes} inconsistent with |V_phy| = {cg.n_phys}")
    logger.debug(
        f"Computational graph: {cg.n_nodes} nodes ({cg.n_phys} physical), {len(cg.duplicate_groups)} duplicate groups"
    )
    return cg


def gather(x_phy: Union[Tensor, np.ndarray], cg: CompGraph):
    """X_com = X_phy[index_block]"""
    if isinstance(x_phy, Tensor):
        return ad.gather_rows(x_phy, cg.index_block)
    return np.asarray(x_phy)[cg.index_block]


def scatter_average(r_com: Union[Tensor, np.ndarray], cg: CompGraph):
    """Mean over each physical node's duplicate group"""
    inv = 1.0 / cg.counts.astype(np.float64)
    if isinstance(r_com, Tensor):
        total = ad.scatter_add_rows(r_com, cg.index_block, cg.n_phys)
        factor = inv.reshape((-1,) + (1,) * (total.ndim - 1))
        return ad.scale(total, np.broadcast_to(factor, total.shape))
    r_com = np.asarray(r_com, dtype=np.float64)
    total = np.zeros((cg.n_phys,) + r_com.shape[1:], dtype=np.float64)
    np.add.at(total, cg.index_block, r_com)
    return total * inv.reshape((-1,) + (1,) * (total.ndim - 1))


# ==============================================================================
# Disjoint-union batching


def batch_physical(graphs: Sequence[PhysGraph]) -> PhysGraph:
    offsets = np.concatenate([[0], np.cumsum([g.n_nodes for g in graphs])])
    edge_offsets = np.concatenate([[0], np.cumsum([g.n_edges for g in graphs])])
    return PhysGraph(
        n_nodes=int(offsets[-1]),
        coords=np.concatenate([g.coords for g in graphs]),
        node_type=np.concatenate([g.node_type for g in graphs]),
        senders=np.concatenate([g.senders + o for g, o in zip(graphs, offsets)]),
        receivers=np.concatenate([g.receivers + o for g, o in zip(graphs, offsets)]),
        cells=np.concatenate([g.cells + o for g, o in zip(graphs, offsets)]),
        cell_edges=np.concatenate([g.cell_edges + o for g, o in zip(graphs, edge_offsets)]),
    )


def _shift_neighbours(table: np.ndarray, offset: int) -> np.ndarray:
    return np.where(table == MISSING, MISSING, table + offset)


def batch_computational(graphs: Sequence[CompGraph]) -> CompGraph:
    """Block-diagonal union; neighbour and physical indices are offset per graph"""
    com = np.concatenate([[0], np.cumsum([g.n_nodes for g in graphs])])
    phy = np.concatenate([[0], np.cumsum([g.n_phys for g in graphs])])
    blk = np.concatenate([[0], np.cumsum([int(g.block_of.max()) + 1 for g in graphs])])
    return CompGraph(
        n_nodes=int(com[-1]),
        n_phys=int(phy[-1]),
        index_block=np.concatenate([g.index_block + o for g, o in zip(graphs, phy)]),
        block_of=np.concatenate([g.block_of + o for g, o in zip(graphs, blk)]),
        ij=np.concatenate([g.ij for g in graphs]),
        minus=np.concatenate([_shift_neighbours(g.minus, o) for g, o in zip(graphs, com)]),
        plus=np.concatenate([_shift_neighbours(g.plus, o) for g, o in zip(graphs, com)]),
        minus_axis=np.concatenate([g.minus_axis for g in graphs]),
        plus_axis=np.concatenate([g.plus_axis for g in graphs]),
        minus_sign=np.concatenate([g.minus_sign for g in graphs]),
        plus_sign=np.concatenate([g.plus_sign for g in graphs]),
        node_type=np.concatenate([g.node_type for g in graphs]),
        n_block_edges=sum(g.n_block_edges for g in graphs),
        normal=np.concatenate([g.normal for g in graphs]),
    )


def build_graphs(mesh: MultiBlockMesh) -> Tuple[PhysGraph, CompGraph]:
    pg = build_physical_graph(mesh)
    return pg, to_computational_graph(pg, mesh)
