"""
Self-checks of the residual engine: message passing against the loop
reference, block-split invariance, and reverse-mode gradients against
finite differences.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional

import numpy as np

from gcfdm import autodiff as ad
from gcfdm.boundary import FlowConditions, apply_dirichlet, boundary_values
from gcfdm.config import resolve_threads
from gcfdm.generators import split_block
from gcfdm.gnmodel import GNConfig, GNModel, forward
from gcfdm.graph import build_graphs
from gcfdm.mesh import MultiBlockMesh
from gcfdm.metrics import compute_metrics
from gcfdm.residual import assemble_residuals_gc, assemble_residuals_loop, loss

logger = logging.getLogger(__name__)


def _random_field(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 3))


def _max_difference(a, b) -> float:
    values = np.max(np.abs(a.array() - b.array())) if a.array().size else 0.0
    outlet = np.max(np.abs(a.r_p - b.r_p)) if a.r_p.size else 0.0
    return float(max(values, outlet))


def oracle_equivalence(
    mesh: MultiBlockMesh, trials: int = 100, seed: int = 0, re: float = 100.0, threads: Optional[int] = None
) -> Dict:
    """
    Largest |gc - loop| residual difference over random fields.

    Trials run on a thread pool; each draws from its own child seed and the
    results are merged in trial order.
    """
    _, cg = build_graphs(mesh)
    metrics = compute_metrics(mesh, cg)
    # warm the cached stencil tables before the workers share them
    cg.central_operator(0)
    cg.half_edges(0)
    cg.counts
    seeds = np.random.SeedSequence(seed).spawn(trials)

    def trial(child: np.random.SeedSequence) -> float:
        field = _random_field(np.random.default_rng(child), mesh.n_nodes)
        return _max_difference(
            assemble_residuals_gc(field, metrics, cg, re), assemble_residuals_loop(field, metrics, cg, re)
        )

    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        differences = list(pool.map(trial, seeds))
    worst = max(differences) if differences else 0.0
    logger.info(f"Oracle equivalence over {trials} trial(s): max |gc - loop| = {worst:.3e}")
    return {"trials": trials, "max_difference": worst}


def split_consistency(mesh: MultiBlockMesh, block: int, i_split: int, seed: int = 0, re: float = 100.0) -> float:
    """
    Residual difference between a mesh and the same mesh with one block split.

    Nodes are matched through their coordinates, which the split copies exactly.
    """
    split = split_block(mesh, block, i_split)
    coords = mesh.physical_coords()
    lookup = {tuple(c): k for k, c in enumerate(coords.tolist())}
    order = np.array([lookup[tuple(c)] for c in split.physical_coords().tolist()], dtype=np.int64)

    field = _random_field(np.random.default_rng(seed), mesh.n_nodes)
    results = []
    for m, f in ((mesh, field), (split, field[order])):
        _, cg = build_graphs(m)
        results.append(assemble_residuals_gc(f, compute_metrics(m, cg), cg, re))
    whole, parts = results
    difference = np.max(np.abs(whole.array()[order] - parts.array()))
    if whole.r_p.size:
        outlet = {k: row for k, row in zip(whole.outlet_nodes.tolist(), whole.r_p)}
        mapped = np.array([outlet[order[k]] for k in parts.outlet_nodes.tolist()])
        difference = max(difference, np.max(np.abs(mapped - parts.r_p)))
    logger.info(f"Split consistency (block {block} at i={i_split}): max difference {difference:.3e}")
    return float(difference)


def gradient_check_fields(
    mesh: MultiBlockMesh, seed: int = 0, re: float = 100.0, max_coords: Optional[int] = 60
) -> float:
    """Relative error of d(loss)/d(field) against central differences"""
    _, cg = build_graphs(mesh)
    metrics = compute_metrics(mesh, cg)
    field = 0.1 * _random_field(np.random.default_rng(seed), mesh.n_nodes)

    def objective(x):
        return loss(assemble_residuals_gc(x, metrics, cg, re))

    error = ad.grad_check(objective, field, step=1e-6, max_coords=max_coords, seed=seed)
    logger.info(f"Field gradient check: relative error {error:.3e}")
    return error


def gradient_check_model(
    mesh: MultiBlockMesh,
    seed: int = 0,
    re: float = 100.0,
    latent_dim: int = 8,
    depth: int = 2,
    max_coords: Optional[int] = 8,
) -> float:
    """Relative error of d(loss)/d(parameters) through a small network, BCs imposed"""
    pg, cg = build_graphs(mesh)
    metrics = compute_metrics(mesh, cg)
    mask, values = boundary_values(mesh, FlowConditions(reynolds=re, viscous_re=re))
    config = GNConfig(latent_dim=latent_dim, depth=depth, seed=seed)
    model = GNModel(config)
    names = list(model.params)
    field = apply_dirichlet(0.1 * _random_field(np.random.default_rng(seed), mesh.n_nodes), mask, values)

    def objective(*tensors):
        predicted = apply_dirichlet(forward(pg, field, dict(zip(names, tensors)), config), mask, values)
        return loss(assemble_residuals_gc(predicted, metrics, cg, re))

    error = ad.grad_check(
        objective, [p.data for p in model.parameters()], step=1e-6, max_coords=max_coords, seed=seed
    )
    logger.info(f"Model gradient check over {len(names)} tensors: relative error {error:.3e}")
    return error
