"""Command-line entry point: ``vlump {mesh,spectrum,solve,bench,plot}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import (
    MESH_KINDS,
    ConfigError,
    load_config,
    make_mesh,
    run_convergence_study,
    run_spectrum_study,
)
from .mesh import dump_mesh, extract_top_surface
from .plots import render_plots

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("vlump")


def _list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.replace(",", " ").split()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from exc
    return parse


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI experiment config")
    p.add_argument("--eps", type=_list(float), help="aspect ratios, e.g. 1,0.1,0.01")
    p.add_argument("--precond", type=_list(str), help="none, ssor, amg, vl-sor, vl-add")
    p.add_argument("--mesh-kind", choices=MESH_KINDS)
    p.add_argument("--mesh-path", help="Gmsh MSH 2.2 file for --mesh-kind gmsh")
    p.add_argument("--n-points", type=int, help="target point count (unstructured, multiscale)")
    p.add_argument("--layers", type=_list(int), help="nx,ny,nz for the layered box")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlump", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vlump {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate or import a mesh, write a dump, print statistics")
    _common(p)
    p = sub.add_parser("spectrum", help="condition numbers and gap census over the aspect ratios")
    _common(p)
    p.add_argument("--bc", choices=("neumann", "dirichlet_top"))
    p.add_argument("--gap-skip", type=int)
    p = sub.add_parser("solve", help="PCG solves for each preconditioner at one aspect ratio")
    _common(p)
    p = sub.add_parser("bench", help="full convergence study plus plots")
    _common(p)
    p = sub.add_parser("plot", help="SVG charts from trace CSV files")
    p.add_argument("traces", nargs="*", type=Path)
    p.add_argument("--out", default="plots")
    return parser


def config_from_args(args) -> "ExperimentConfig":  # noqa: F821
    over = {
        "epsilons": args.eps,
        "preconditioners": args.precond,
        "mesh.kind": args.mesh_kind,
        "mesh.path": args.mesh_path,
        "mesh.n_points": args.n_points,
        "mesh.seed": args.seed,
        "out_dir": args.out,
        "tol": args.tol,
        "max_iters": args.max_iters,
        "bc": getattr(args, "bc", None),
        "gap_skip": getattr(args, "gap_skip", None),
    }
    if args.layers is not None:
        if len(args.layers) != 3:
            raise ConfigError("--layers needs three integers nx,ny,nz")
        over.update({"mesh.nx": args.layers[0], "mesh.ny": args.layers[1],
                     "mesh.nz": args.layers[2]})
    return load_config(args.config, over)


def cmd_mesh(cfg) -> int:
    mesh = make_mesh(cfg.mesh)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mesh.txt"
    dump_mesh(mesh, path)
    surf = extract_top_surface(mesh)
    vol = mesh.volumes()
    print(f"nodes {mesh.n_nodes}  tets {mesh.n_tets}  top nodes {surf.surface_nodes.size}  "
          f"top triangles {len(surf.triangles)}")
    print(f"tet volume min {vol.min():.3e} max {vol.max():.3e} total {vol.sum():.6f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_spectrum(cfg) -> int:
    sweep, path = run_spectrum_study(cfg)
    for r in sweep.reports:
        gap = "" if r.gap is None else f"  gap {r.gap.gap_ratio:.3g} below {r.gap.below_gap_count}"
        print(f"eps {r.epsilon:<8g} lambda [{r.lambda_min:.4e}, {r.lambda_max:.4e}]  "
              f"cond {r.cond:.4e}{gap}")
    if sweep.slope is not None:
        print(f"fitted log-log slope {sweep.slope:.3f}")
    if sweep.limit_cond is not None:
        print(f"max cond / cond(eps=0) = {sweep.cond_ratio_to_limit:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def _report(result) -> int:
    for r in result.rows:
        if r["status"] == "ok":
            print(f"eps {r['epsilon']:<8} {r['precond']:<7} iterations {r['iterations']:<5} "
                  f"to 1e6 reduction {r['iters_to_1e6'] or '-':<5} ({r['stop_reason']})")
        else:
            print(f"eps {r['epsilon']:<8} {r['precond']:<7} FAILED {r['message']}")
    return EXIT_FAILED if result.failures else EXIT_OK


def cmd_solve(cfg) -> int:
    if len(cfg.epsilons) != 1:
        raise ConfigError("solve takes exactly one aspect ratio; use bench for sweeps")
    return _report(run_convergence_study(cfg))


def cmd_bench(cfg) -> int:
    result = run_convergence_study(cfg)
    traces = [f for f in result.files if f.name.startswith("trace_")]
    if traces:
        for p in render_plots(traces, cfg.out_dir):
            print(f"wrote {p}")
    return _report(result)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plot":
        try:
            for p in render_plots(args.traces, args.out):
                print(f"wrote {p}")
        except (OSError, ValueError) as exc:
            print(f"vlump plot: {exc}", file=sys.stderr)
            return EXIT_FAILED if args.traces else EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"vlump: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = {"mesh": cmd_mesh, "spectrum": cmd_spectrum, "solve": cmd_solve,
               "bench": cmd_bench}[args.command]
    try:
        return handler(cfg)
    except ConfigError as exc:
        print(f"vlump: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"vlump {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
