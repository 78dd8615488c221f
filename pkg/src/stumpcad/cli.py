"""Command-line pipeline: normalize, fit, refine, eval.

Every subcommand is deterministic given --seed and writes a run manifest
JSON next to its primary output, capturing the resolved configuration,
seeds, inputs and outputs needed to replay it.

Exit codes are a stable contract: 0 success, 2 parse error, 3 budget
exceeded, 4 verification failure, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from . import __version__, csg, dsl, export, fit, geometry, sampling

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_BUDGET = 3
EXIT_VERIFY = 4
EXIT_NUMERIC = 5


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (dsl.CsgParseError, export.SchemaError, export.ScadParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (fit.BudgetExceededError, csg.ColumnBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except fit.NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stumpcad",
                                     description="fit and export three-layer CSG models")
    parser.add_argument("--version", action="version", version=f"stumpcad {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config with default options")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", parents=[common],
                       help="convert a .csg program into an equivalent stump")
    p.add_argument("input", type=Path, help=".csg source file")
    p.add_argument("-o", "--output", type=Path, default=Path("stump.json"))
    p.add_argument("--no-simplify", action="store_true")
    p.add_argument("--simplify-points", type=int, default=10000)
    p.add_argument("--max-columns", type=int, default=4096)
    p.add_argument("--verify", action="store_true",
                   help="check the stump against the tree on 10k points")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("fit", parents=[common],
                       help="recover connection matrices from labeled points")
    p.add_argument("--reference", type=Path, help=".csg shape: primitives and labels source")
    p.add_argument("--points", type=Path, help="points file (.xyz, optionally 'x y z label')")
    p.add_argument("--labels", type=Path, help="label file (one 0/1 per line)")
    p.add_argument("--primitives", type=Path,
                   help="JSON with a 'primitives' array (e.g. a stump.json)")
    p.add_argument("--n", type=int, default=1000, help="sample count for --reference")
    p.add_argument("--sampling", choices=("uniform", "balanced"), default="uniform")
    p.add_argument("--solver", choices=("exhaustive", "minterm", "anneal"), default="anneal")
    p.add_argument("--C", type=int, required=True, dest="c")
    p.add_argument("--allow-complement", dest="allow_complement", action="store_true",
                   default=True)
    p.add_argument("--no-complement", dest="allow_complement", action="store_false")
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--sweeps", type=int, default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--max-bits", type=int, default=24)
    p.add_argument("-o", "--output", type=Path, default=Path("stump.json"))
    p.add_argument("--report", type=Path, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refine", parents=[common],
                       help="continuously optimize a stump against labeled points")
    p.add_argument("stump", type=Path)
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--psi", type=float, default=None)
    p.add_argument("--freeze-weights", action="store_true")
    p.add_argument("--freeze-primitives", action="store_true")
    p.add_argument("-o", "--output", type=Path, default=Path("refined.json"))
    p.add_argument("--report", type=Path, default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common],
                       help="compute metrics and export artifacts for a shape")
    p.add_argument("shape", type=Path, help="stump.json or .csg")
    p.add_argument("--chamfer", type=Path, help="reference shape for Chamfer distance")
    p.add_argument("--grid", type=str, help="rasterize, e.g. 64 or 64,64,64")
    p.add_argument("--grid-out", type=Path)
    p.add_argument("--mesh", type=Path, help=".obj or .stl output")
    p.add_argument("--scad", type=Path, help="OpenSCAD output")
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("-o", "--output", type=Path, default=Path("metrics.json"))
    p.set_defaults(func=cmd_eval)
    return parser


# ---------------------------------------------------------------------------
# Config and manifests
# ---------------------------------------------------------------------------

def load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    with open(args.config, "rb") as fh:
        return tomli.load(fh)


def resolve(args, section: dict, name: str, default):
    """CLI flag beats config beats default."""
    val = getattr(args, name, None)
    if val is not None:
        return val
    if name in section:
        return section[name]
    return default


def write_manifest(args, primary_output: Path, inputs: list, outputs: list,
                   config: dict, wall_time: float) -> None:
    manifest = {
        "tool": "stumpcad",
        "version": __version__,
        "subcommand": args.command,
        "seed": args.seed,
        "threads": args.threads,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_time": wall_time,
    }
    path = Path(str(primary_output) + ".manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def say(args, *message) -> None:
    if not args.quiet:
        print(*message)


# ---------------------------------------------------------------------------
# Input loading helpers
# ---------------------------------------------------------------------------

def load_shape(path: Path):
    """(expr, prims) from a .csg file or a stump JSON (unfolded to a tree)."""
    if path.suffix == ".csg":
        with open(path) as fh:
            return dsl.parse_csg(fh.read())
    stump = export.load_stump(path)
    if isinstance(stump, csg.SoftStump):
        stump = csg.binarize(stump)
    return csg.stump_as_tree(stump)


def load_points(points_path: Path, labels_path: Path | None) -> sampling.TestPointSet:
    if points_path.suffix == ".bin":
        pts = sampling.load_bin(points_path)
        labels = None
    else:
        pts, labels = sampling.load_xyz(points_path)
    if labels_path is not None:
        labels = sampling.load_labels(labels_path)
    if labels is None:
        raise export.SchemaError(str(points_path),
                                 "no labels: use 'x y z label' lines or --labels")
    lo = pts.min(axis=0) - 1e-9
    hi = pts.max(axis=0) + 1e-9
    return sampling.TestPointSet(pts, labels, (lo, hi),
                                 sampling.Provenance.LOADED_FILE)


def load_primitives(path: Path) -> list[geometry.Primitive]:
    with open(path) as fh:
        doc = json.load(fh)
    text = json.dumps({"primitives": doc["primitives"],
                       "w_c": [0] * len(doc["primitives"]),
                       "w_i": [[] for _ in doc["primitives"]],
                       "w_u": [], "soft": False})
    return list(export.stump_from_json(text).primitives)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_normalize(args) -> int:
    start = time.perf_counter()
    config = load_config(args).get("normalize", {})
    with open(args.input) as fh:
        expr, prims = dsl.parse_csg(fh.read())
    stump = csg.tree_to_stump(expr, prims, max_columns=args.max_columns)
    raw_columns = stump.c
    if not args.no_simplify:
        pts = sampling.sample_uniform(expr, prims, args.simplify_points, seed=args.seed)
        stump = csg.simplify_stump(stump, pts.points)
    export.save_stump(args.output, stump)
    say(args, f"K={stump.k} C={stump.c} columns={raw_columns}->{stump.c}")

    code = EXIT_OK
    if args.verify:
        check = sampling.sample_uniform(expr, prims, 10000, seed=args.seed + 1)
        ours = csg.stump_eval_hard(stump, check.points)
        if not np.array_equal(ours, check.target):
            bad = int((ours != check.target).sum())
            say(args, f"VERIFY FAILED: {bad}/10000 points disagree")
            code = EXIT_VERIFY
        else:
            say(args, "verify: stump matches tree on 10000 points")
    write_manifest(args, args.output, [args.input], [args.output],
                   {**config, "max_columns": args.max_columns,
                    "simplify": not args.no_simplify,
                    "simplify_points": args.simplify_points},
                   time.perf_counter() - start)
    return code


def cmd_fit(args) -> int:
    start = time.perf_counter()
    config = load_config(args).get("fit", {})
    if args.reference:
        expr, prims = load_shape(args.reference)
        sampler = sampling.sample_balanced if args.sampling == "balanced" \
            else sampling.sample_uniform
        pts = sampler(expr, prims, args.n, seed=args.seed)
        inputs = [args.reference]
    elif args.points and args.primitives:
        pts = load_points(args.points, args.labels)
        prims = load_primitives(args.primitives)
        inputs = [args.points, args.primitives]
    else:
        print("error: need --reference or (--points and --primitives)", file=sys.stderr)
        return EXIT_PARSE

    inst = fit.instance_from_points(prims, pts, args.c, args.allow_complement)
    if args.solver == "exhaustive":
        sol, report = fit.solve_exhaustive(inst, max_bits=args.max_bits)
    elif args.solver == "minterm":
        sol, report = fit.solve_minterm(inst)
    else:
        cfg = fit.AnnealConfig(
            restarts=int(resolve(args, config, "restarts", 8)),
            sweeps=int(resolve(args, config, "sweeps", 600)),
            decay=float(resolve(args, config, "decay", 0.995)),
            seed=args.seed, threads=args.threads)
        sol, report = fit.solve_anneal(inst, cfg)

    stump = sol.to_stump(prims)
    export.save_stump(args.output, stump)
    report_path = args.report or Path(str(args.output) + ".report.json")
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    say(args, f"solver={args.solver} objective={report.objective:.6f} "
              f"wall={report.wall_time:.2f}s")
    write_manifest(args, args.output, inputs, [args.output, report_path],
                   {"solver": args.solver, "C": args.c, "n": args.n,
                    "sampling": args.sampling, "allow_complement": args.allow_complement},
                   time.perf_counter() - start)
    return EXIT_OK


def cmd_refine(args) -> int:
    start = time.perf_counter()
    config = load_config(args).get("refine", {})
    loaded = export.load_stump(args.stump)
    pts = load_points(args.points, args.labels)

    eta = float(resolve(args, config, "eta", geometry.DEFAULT_ETA))
    psi = float(resolve(args, config, "psi", geometry.DEFAULT_PSI))
    sharp = geometry.Sharpness(eta, psi)
    if isinstance(loaded, csg.SoftStump):
        soft = csg.SoftStump(loaded.primitives, loaded.w_c, loaded.w_i, loaded.w_u, sharp)
    else:
        soft = csg.soft_lift(loaded, sharpness=sharp)

    cfg = fit.OptimConfig(
        iters=int(resolve(args, config, "iters", 2000)),
        lr=float(resolve(args, config, "lr", 1e-3)),
        lam=float(resolve(args, config, "lam", 0.001)),
        freeze_weights=args.freeze_weights,
        freeze_primitives=args.freeze_primitives)

    init_soft_recon = fit.loss_recon(soft, pts)
    init_hard = _hard_recon(csg.binarize(soft), pts)
    refined, report = fit.refine_continuous(soft, pts, cfg)
    final_soft_recon = fit.loss_recon(refined, pts)
    binary = csg.binarize(refined)
    final_hard = _hard_recon(binary, pts)

    export.save_stump(args.output, binary)
    report_payload = report.to_dict()
    report_payload["l_recon_soft_init"] = init_soft_recon
    report_payload["l_recon_soft"] = final_soft_recon
    report_payload["l_recon_binarized_init"] = init_hard
    report_payload["l_recon_binarized"] = final_hard
    report_path = args.report or Path(str(args.output) + ".report.json")
    with open(report_path, "w") as fh:
        json.dump(report_payload, fh, indent=2)
        fh.write("\n")
    say(args, f"soft recon {init_soft_recon:.6f} -> {final_soft_recon:.6f}; "
              f"binarized {init_hard:.6f} -> {final_hard:.6f}")
    write_manifest(args, args.output, [args.stump, args.points],
                   [args.output, report_path],
                   {"iters": cfg.iters, "lr": cfg.lr, "lambda": cfg.lam,
                    "eta": eta, "psi": psi,
                    "freeze_weights": cfg.freeze_weights,
                    "freeze_primitives": cfg.freeze_primitives},
                   time.perf_counter() - start)
    return EXIT_OK


def _hard_recon(stump: csg.Stump, pts: sampling.TestPointSet) -> float:
    t = csg.stump_eval_hard(stump, pts.points)
    return float(np.mean((t.astype(np.float64) - pts.target) ** 2))


def cmd_eval(args) -> int:
    start = time.perf_counter()
    expr, prims = load_shape(args.shape)
    metrics: dict = {"shape": str(args.shape)}
    outputs = [args.output]

    if args.grid or args.grid_out or args.mesh:
        dims = _parse_dims(args.grid) if args.grid else (args.resolution,) * 3
        grid = export.rasterize((expr, prims), dims)
        metrics["grid_dims"] = list(dims)
        metrics["grid_inside_fraction"] = float(grid.values.mean())
        if args.grid_out:
            export.save_grid(args.grid_out, grid)
            outputs.append(args.grid_out)
        if args.mesh:
            mesh = export.marching_cubes(grid, 0.5)
            if args.mesh.suffix == ".stl":
                export.save_stl(args.mesh, mesh)
            else:
                export.save_obj(args.mesh, mesh)
            metrics["mesh_vertices"] = int(mesh.vertices.shape[0])
            metrics["mesh_faces"] = int(mesh.faces.shape[0])
            outputs.append(args.mesh)

    if args.scad:
        with open(args.scad, "w") as fh:
            fh.write(export.export_openscad(expr, prims))
        outputs.append(args.scad)

    if args.chamfer:
        ref_expr, ref_prims = load_shape(args.chamfer)
        a = sampling.sample_surface((expr, prims), args.samples,
                                    resolution=args.resolution, seed=args.seed)
        b = sampling.sample_surface((ref_expr, ref_prims), args.samples,
                                    resolution=args.resolution, seed=args.seed)
        cd = sampling.chamfer_l2(a, b)
        metrics["chamfer_l2"] = cd
        metrics["chamfer_l2_x1000"] = cd * 1000.0

    with open(args.output, "w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    say(args, json.dumps(metrics, indent=2))
    write_manifest(args, args.output,
                   [args.shape] + ([args.chamfer] if args.chamfer else []),
                   outputs,
                   {"samples": args.samples, "resolution": args.resolution},
                   time.perf_counter() - start)
    return EXIT_OK


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) == 3:
        return tuple(parts)  # type: ignore[return-value]
    raise export.SchemaError("--grid", f"expected 1 or 3 integers, got {text!r}")


if __name__ == "__main__":
    sys.exit(main())
