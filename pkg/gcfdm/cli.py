#!/usr/bin/env python3
"""
gcfdm command line

Meshes, residual verification, steady solves, network training and
inference, evaluation and export from one entry point. Reports go to
stdout (JSON with ``--json``); logs go to stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from gcfdm import __version__
from gcfdm.boundary import FlowConditions, boundary_values
from gcfdm.config import resolve_threads, settings
from gcfdm.errors import GCFDMError, NumericalError
from gcfdm.generators import (
    GENERATORS,
    generate_cavity,
    generate_channel,
    generate_cylinder_channel,
    generate_double_cylinder_channel,
)
from gcfdm.gnmodel import load_checkpoint, rollout
from gcfdm.graph import build_graphs
from gcfdm.mesh import MultiBlockMesh, PatchKind, describe, load_mesh, save_mesh, validate_topology
from gcfdm.metrics import compute_metrics
from gcfdm.mms import freestream_commutator, metric_convergence, residual_convergence
from gcfdm.post import drag_coefficient, export_field, import_csv, relative_mae
from gcfdm.residual import loss_components, residual_loss
from gcfdm.solver import SolverConfig, direct_solve, pseudo_time_solve
from gcfdm.training import DatasetSpec, GeometrySpec, TrainConfig, run_training
from gcfdm.verify import gradient_check_fields, gradient_check_model, oracle_equivalence

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class CommandError(Exception):
    """A command finished but its report says it failed"""

    def __init__(self, message: str, code: int = EXIT_VALIDATION, report: Optional[Dict] = None):
        super().__init__(message)
        self.code = code
        self.report = report


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def configure_logging(debug: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.GCFDM_LOG_FILE:
        handlers.append(logging.FileHandler(settings.GCFDM_LOG_FILE))
    logging.basicConfig(
        level=logging.DEBUG if debug else getattr(logging, settings.GCFDM_LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def emit(report: Dict[str, Any], as_json: bool) -> None:
    if as_json:
        print(json.dumps(report, indent=2, sort_keys=True, default=float))
        return
    for key, value in report.items():
        print(f"{key}: {value}")


def read_config(path: Optional[str]) -> Dict[str, Any]:
    """JSON object from ``--config``; empty when no file is given"""
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise CommandError(f"Cannot read config file {path}: {str(e)}")
    if not isinstance(data, dict):
        raise CommandError(f"Config file {path} must hold a JSON object")
    return data


def merge(file_values: Dict[str, Any], **flags) -> Dict[str, Any]:
    """Config file values overridden by every flag that was given"""
    merged = dict(file_values)
    merged.update({key: value for key, value in flags.items() if value is not None})
    return merged


# ==============================================================================
# Mesh selection


def add_mesh_source(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mesh", help="MBG mesh file (topology read from <stem>.topo.json)")
    parser.add_argument("--geometry", choices=sorted(GENERATORS), help="Generate the mesh instead of loading it")
    parser.add_argument("--n", type=int, default=33, help="Cavity nodes per side / channel nx")
    parser.add_argument("--ny", type=int, default=17, help="Channel ny")
    parser.add_argument("--splits", type=int, default=0, help="Channel block splits")
    parser.add_argument("--resolution", default="coarse", help="Cylinder mesh resolution")


def mesh_from_args(args) -> MultiBlockMesh:
    if args.mesh:
        return load_mesh(args.mesh)
    if args.geometry == "cavity":
        return generate_cavity(args.n)
    if args.geometry == "channel":
        return generate_channel(args.n, args.ny, args.splits)
    if args.geometry == "cylinder":
        return generate_cylinder_channel(resolution=args.resolution)
    if args.geometry == "double_cylinder":
        return generate_double_cylinder_channel(resolution=args.resolution)
    raise CommandError("Give --mesh or --geometry", code=EXIT_USAGE)


def geometry_of(mesh: MultiBlockMesh, requested: Optional[str] = None) -> str:
    if requested:
        return requested
    kinds = {patch.kind for patch in mesh.boundaries}
    return "cavity" if PatchKind.MOVING_LID in kinds else "channel"


def conditions_from_args(args, mesh: MultiBlockMesh) -> FlowConditions:
    return FlowConditions.for_geometry(geometry_of(mesh, args.geometry), args.re)


# ==============================================================================
# Commands


def cmd_mesh_gen(args) -> Dict:
    if args.kind == "cavity":
        mesh = generate_cavity(args.n, args.length)
    elif args.kind == "channel":
        mesh = generate_channel(args.n, args.ny, args.splits)
    elif args.kind == "cylinder":
        mesh = generate_cylinder_channel(center=tuple(args.center), diameter=args.diameter, resolution=args.resolution)
    else:
        mesh = generate_double_cylinder_channel(resolution=args.resolution)
    mesh_file, topo_file = save_mesh(mesh, args.out)
    return {"mesh": str(mesh_file), "topology": str(topo_file), **describe(mesh)}


def cmd_mesh_info(args) -> Dict:
    return describe(load_mesh(args.path))


def cmd_mesh_validate(args) -> Dict:
    diagnostics = validate_topology(load_mesh(args.path, check=False))
    report = {"valid": not diagnostics, "diagnostics": [d.as_dict() for d in diagnostics]}
    if diagnostics:
        for d in diagnostics:
            logger.warning(d.message)
        raise CommandError(f"{args.path}: {len(diagnostics)} problem(s)", report=report)
    return report


def cmd_metrics_check(args) -> Dict:
    metric = metric_convergence(args.levels)
    residual = residual_convergence(args.levels, re=args.re)
    report = {"metrics": metric.as_dict(), "residual": residual.as_dict()}
    if args.mesh or args.geometry:
        mesh = mesh_from_args(args)
        _, cg = build_graphs(mesh)
        report["freestream_commutator"] = freestream_commutator(compute_metrics(mesh, cg), cg)
    return report


def cmd_residual_verify(args) -> Dict:
    mesh = mesh_from_args(args)
    threads = resolve_threads(args.threads)
    seed = args.seed or 0
    report = {
        "oracle": oracle_equivalence(mesh, args.trials, seed, args.re, threads),
        "field_gradient_error": gradient_check_fields(mesh, seed, args.re),
    }
    if args.model_check:
        report["model_gradient_error"] = gradient_check_model(mesh, seed, args.re)
    failed = report["oracle"]["max_difference"] > args.tolerance or report["field_gradient_error"] > 1e-5
    if failed:
        raise CommandError("Residual verification failed", code=EXIT_NUMERICAL, report=report)
    return report


def cmd_solve(args) -> Dict:
    mesh = mesh_from_args(args)
    conditions = conditions_from_args(args, mesh)
    config = SolverConfig.model_validate(
        merge(
            read_config(args.config),
            method=args.method,
            tol=args.tol,
            max_iters=args.max_iters,
            lr=args.lr,
            dt=args.dt,
            cfl=args.cfl,
            dissipation=args.dissipation,
            steps=args.steps,
        )
    )
    if args.mode == "direct":
        field, report = direct_solve(mesh, conditions, config)
    else:
        field, report = pseudo_time_solve(mesh, conditions, config)
    result = {"reynolds": conditions.reynolds, **report.as_dict()}
    if args.out:
        result["output"] = [str(p) for p in export_field(field, mesh, args.out, _format_of(args.out))]
    if report.diverged:
        raise CommandError("Solver diverged; best iterate kept", code=EXIT_NUMERICAL, report=result)
    return result


def _format_of(path: str) -> str:
    return "csv" if Path(path).suffix.lower() == ".csv" else "vtk"


def cmd_train(args) -> Dict:
    file_values = read_config(args.config)
    if args.dataset:
        dataset = DatasetSpec.model_validate_json(Path(args.dataset).read_text())
    elif args.parameterized:
        dataset = DatasetSpec.parameterized()
    else:
        dataset = DatasetSpec(
            geometries=[
                GeometrySpec(
                    geometry=args.geometry or "cavity",
                    re_min=args.re,
                    re_max=args.re_max,
                    re_step=args.re_step,
                    n=args.n,
                    ny=args.ny,
                    resolution=args.resolution,
                )
            ]
        )
    values = merge(
        file_values,
        epochs=args.epochs,
        decay_epoch=args.decay_epoch,
        batch_size=args.batch_size,
        batches_per_epoch=args.batches_per_epoch,
        t_max=args.t_max,
        lr=args.lr,
        latent_dim=args.latent_dim,
        depth=args.depth,
        replication=args.replication,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
    )
    if args.epochs is not None and args.decay_epoch is None and "decay_epoch" not in file_values:
        values["decay_epoch"] = max(1, int(0.4 * args.epochs))
    config = TrainConfig.model_validate(values)
    result = run_training(dataset, config, args.out)
    last = result.history[-1]
    return {
        "steps": len(result.history),
        "final_loss": last["loss"],
        "checkpoint": str(result.checkpoint),
        "history": str(result.history_path),
    }


def cmd_infer(args) -> Dict:
    model = load_checkpoint(args.checkpoint)
    mesh = mesh_from_args(args)
    conditions = conditions_from_args(args, mesh)
    pg, cg = build_graphs(mesh)
    mask, values = boundary_values(mesh, conditions)
    field = rollout(model, pg, mask, values, args.iterations)
    total, R = residual_loss(field.values, compute_metrics(mesh, cg), cg, conditions.viscous_re)
    report = {"reynolds": conditions.reynolds, "iterations": args.iterations, "loss": total.item(), **loss_components(R)}
    if args.out:
        report["output"] = [str(p) for p in export_field(field, mesh, args.out, _format_of(args.out))]
    return report


def cmd_eval(args) -> Dict:
    mesh = mesh_from_args(args)
    pred = import_csv(args.pred, mesh)
    report: Dict[str, Any] = {}
    if args.ref:
        ref = import_csv(args.ref, mesh)
        report["velocity_mae"] = relative_mae(pred, ref, "velocity_magnitude")
        report["pressure_mae"] = relative_mae(pred, ref, "pressure")
    if args.drag:
        conditions = conditions_from_args(args, mesh)
        report["drag_coefficient"] = drag_coefficient(
            pred, mesh, conditions.viscous_re, args.label, conditions.mean_velocity, conditions.diameter
        )
    if not report:
        raise CommandError("Nothing to evaluate: give --ref and/or --drag", code=EXIT_USAGE)
    return report


def cmd_export(args) -> Dict:
    mesh = mesh_from_args(args)
    field = import_csv(args.field, mesh)
    written = export_field(field, mesh, args.out, args.format)
    return {"files": [str(p) for p in written]}


# ==============================================================================
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="Print the report as JSON")
    common.add_argument("--seed", type=int, help="Seed for every random draw (default 0)")
    common.add_argument(
        "--threads", type=int, help="Worker cap for the residual oracle check (default: GCFDM_THREADS or all cores)"
    )
    common.add_argument("--debug", action="store_true", help="Enable debug logging")

    parser = ArgumentParser(prog="gcfdm", description="GC-FDM residual engine and physics-constrained graph network")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    mesh = commands.add_parser("mesh", help="Generate, describe and validate meshes")
    mesh_commands = mesh.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    gen = mesh_commands.add_parser("gen", parents=[common], help="Generate a mesh")
    gen.add_argument("kind", choices=sorted(GENERATORS))
    gen.add_argument("--n", type=int, default=55, help="Cavity nodes per side / channel nx")
    gen.add_argument("--ny", type=int, default=17)
    gen.add_argument("--splits", type=int, default=0)
    gen.add_argument("--length", type=float, default=1.0, help="Cavity side length")
    gen.add_argument("--center", type=float, nargs=2, default=(0.2, 0.2))
    gen.add_argument("--diameter", type=float, default=0.1)
    gen.add_argument("--resolution", default="coarse")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_mesh_gen)
    for name, handler, text in (("info", cmd_mesh_info, "Describe a mesh"), ("validate", cmd_mesh_validate, "List invariant violations")):
        sub = mesh_commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("path")
        sub.set_defaults(handler=handler)

    metrics = commands.add_parser("metrics", help="Metric checks")
    metrics_commands = metrics.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    check = metrics_commands.add_parser("check", parents=[common], help="Manufactured-solution convergence study")
    check.add_argument("--levels", type=int, nargs="+", default=[17, 33, 65])
    check.add_argument("--re", type=float, default=10.0)
    add_mesh_source(check)
    check.set_defaults(handler=cmd_metrics_check)

    residual = commands.add_parser("residual", help="Residual engine checks")
    residual_commands = residual.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    verify = residual_commands.add_parser("verify", parents=[common], help="Oracle equivalence and gradient checks")
    add_mesh_source(verify)
    verify.add_argument("--trials", type=int, default=100)
    verify.add_argument("--re", type=float, default=100.0)
    verify.add_argument("--tolerance", type=float, default=1e-12)
    verify.add_argument("--model-check", action="store_true", help="Also check network parameter gradients")
    verify.set_defaults(handler=cmd_residual_verify)

    solve = commands.add_parser("solve", help="Steady solves without a network")
    solve_commands = solve.add_subparsers(dest="mode", required=True, parser_class=ArgumentParser)
    for mode, text in (("direct", "Residual minimization"), ("pseudo", "Pseudo-time marching")):
        sub = solve_commands.add_parser(mode, parents=[common], help=text)
        add_mesh_source(sub)
        sub.add_argument("--re", type=float, default=100.0)
        sub.add_argument("--config", help="JSON file with SolverConfig fields")
        sub.add_argument("--method", choices=["adamw", "lbfgs"])
        sub.add_argument("--tol", type=float)
        sub.add_argument("--max-iters", type=int)
        sub.add_argument("--lr", type=float)
        sub.add_argument("--dt", type=float, help="Fixed pseudo-time step instead of local CFL steps")
        sub.add_argument("--cfl", type=float)
        sub.add_argument("--dissipation", type=float, help="Fourth-difference dissipation strength")
        sub.add_argument("--steps", type=int)
        sub.add_argument("--out", help="Field output (.csv or .vtk)")
        sub.set_defaults(handler=cmd_solve)

    train = commands.add_parser("train", parents=[common], help="Train the graph network")
    train.add_argument("--config", help="JSON file with TrainConfig fields")
    train.add_argument("--dataset", help="JSON file with a DatasetSpec")
    train.add_argument("--parameterized", action="store_true", help="Cavity and cylinder Re ranges")
    train.add_argument("--geometry", choices=sorted(GENERATORS))
    train.add_argument("--n", type=int, default=33)
    train.add_argument("--ny", type=int, default=17)
    train.add_argument("--resolution", default="coarse")
    train.add_argument("--re", type=float, default=100.0)
    train.add_argument("--re-max", type=float)
    train.add_argument("--re-step", type=float)
    train.add_argument("--epochs", type=int)
    train.add_argument("--decay-epoch", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--batches-per-epoch", type=int)
    train.add_argument("--t-max", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--latent-dim", type=int)
    train.add_argument("--depth", type=int)
    train.add_argument("--replication", type=int)
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--out", default=None, help="Output directory (default GCFDM_OUTPUT_DIR)")
    train.set_defaults(handler=cmd_train)

    infer = commands.add_parser("infer", parents=[common], help="Roll a trained network out on a mesh")
    infer.add_argument("--checkpoint", required=True)
    add_mesh_source(infer)
    infer.add_argument("--re", type=float, default=100.0)
    infer.add_argument("--iterations", type=int, default=300)
    infer.add_argument("--out", help="Field output (.csv or .vtk)")
    infer.set_defaults(handler=cmd_infer)

    evaluate = commands.add_parser("eval", parents=[common], help="Relative errors and drag")
    add_mesh_source(evaluate)
    evaluate.add_argument("--pred", required=True, help="Predicted field CSV")
    evaluate.add_argument("--ref", help="Reference field CSV")
    evaluate.add_argument("--drag", action="store_true")
    evaluate.add_argument("--label", default="cylinder")
    evaluate.add_argument("--re", type=float, default=20.0)
    evaluate.set_defaults(handler=cmd_eval)

    export = commands.add_parser("export", parents=[common], help="Convert a field CSV")
    add_mesh_source(export)
    export.add_argument("--field", required=True)
    export.add_argument("--format", choices=["vtk", "csv"], default="vtk")
    export.add_argument("--out", required=True)
    export.set_defaults(handler=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.debug)
    if args.debug:
        logger.debug("Debug logging enabled")

    try:
        report = args.handler(args)
    except CommandError as e:
        logger.error(str(e))
        if e.report is not None:
            emit(e.report, args.json)
        return e.code
    except NumericalError as e:
        logger.error(f"Numerical failure: {str(e)}")
        return EXIT_NUMERICAL
    except (GCFDMError, ValidationError, OSError) as e:
        logger.error(f"Validation failure: {str(e)}")
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_USAGE
    emit(report, args.json)
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
