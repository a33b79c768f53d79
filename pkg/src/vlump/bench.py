"""Batch experiments: config files, convergence studies, spectrum studies.

Config grammar (INI, flat sections, ``#`` comments)::

    [mesh]
    kind = unstructured        # layered | unstructured | multiscale | gmsh
    n_points = 2000            # unstructured, multiscale
    nx = 6                     # layered (also ny, nz)
    path = box.msh             # gmsh
    seed = 0

    [experiment]
    epsilons = 1, 0.1, 0.01
    bc = neumann               # spectrum studies: neumann | dirichlet_top
    preconditioners = none, ssor, amg, vl-sor, vl-add
    field = random             # manufactured solution: random | smooth
    rhs_seed = 1

    [solver]
    tol = 1e-12
    max_iters = 1000
    floor_window = 25

    [spectrum]
    mode = auto                # auto | dense | lanczos
    gap_skip = 0

    [output]
    dir = out

Every key is optional. Command-line flags override file values.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .amg import build_hierarchy
from .fem import assemble, manufactured_rhs
from .lumping import VL_ADD, VL_SOR, build_extrapolation, build_preconditioner
from .mesh import (
    TetMesh,
    generate_layered_box,
    generate_multiscale_box,
    generate_unstructured_box,
    import_gmsh,
)
from .pcg import SsorPreconditioner, pcg
from .sparse import FlopCounter
from .spectrum import (
    DENSE_LIMIT,
    DIRICHLET_TOP,
    NEUMANN,
    scaling_sweep,
    write_spectrum_csv,
)

log = logging.getLogger(__name__)

MESH_KINDS = ("layered", "unstructured", "multiscale", "gmsh")
PRECONDITIONERS = ("none", "ssor", "amg", VL_SOR, VL_ADD)
SUMMARY_COLUMNS = (
    "epsilon", "precond", "status", "iterations", "stop_reason",
    "iters_to_1e6", "flops_to_1e6", "final_inf_error", "message",
)


class ConfigError(ValueError):
    pass


@dataclass
class MeshSpec:
    kind: str = "unstructured"
    n_points: int = 2000
    nx: int = 6
    ny: int = 6
    nz: int = 6
    path: str | None = None
    seed: int = 0


@dataclass
class ExperimentConfig:
    mesh: MeshSpec = field(default_factory=MeshSpec)
    epsilons: list[float] = field(default_factory=lambda: [1.0, 0.1, 0.01, 0.001])
    bc: str = NEUMANN
    preconditioners: list[str] = field(default_factory=lambda: [VL_SOR])
    rhs_field: str = "random"
    rhs_seed: int = 1
    tol: float = 1e-12
    max_iters: int = 1000
    floor_window: int = 25
    spectrum_mode: str = "auto"
    gap_skip: int = 0
    out_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        m = self.mesh
        if m.kind not in MESH_KINDS:
            raise ConfigError(f"unknown mesh kind {m.kind!r}; choose from {', '.join(MESH_KINDS)}")
        if m.kind == "gmsh" and not m.path:
            raise ConfigError("mesh kind gmsh needs a path")
        if not self.epsilons:
            raise ConfigError("no aspect ratios given")
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("aspect ratios must be nonnegative")
        bad = [p for p in self.preconditioners if p not in PRECONDITIONERS]
        if bad or not self.preconditioners:
            raise ConfigError(f"unknown preconditioner(s) {bad}; choose from {', '.join(PRECONDITIONERS)}")
        if self.bc not in (NEUMANN, DIRICHLET_TOP):
            raise ConfigError(f"unknown boundary condition variant {self.bc!r}")
        if self.rhs_field not in ("random", "smooth"):
            raise ConfigError(f"unknown manufactured field {self.rhs_field!r}")
        if self.spectrum_mode not in ("auto", "dense", "lanczos"):
            raise ConfigError(f"unknown spectrum mode {self.spectrum_mode!r}")
        if self.tol <= 0 or self.max_iters < 1 or self.floor_window < 1:
            raise ConfigError("tol, max_iters and floor_window must be positive")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")  # where results go does not change them
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self) -> list[str]:
        return [f"vlump {__version__}", f"config_hash: {self.hash()}"]


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _names(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split()]


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI config (or start from defaults) and apply ``overrides``.

    ``overrides`` uses the dotted keys ``mesh.kind``, ``mesh.seed``,
    ``epsilons``, ``preconditioners``, ``tol``, ``max_iters``, ``out_dir``
    and so on; None values are ignored.
    """
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {"mesh", "experiment", "solver", "spectrum", "output"}
        extra = set(parser.sections()) - known
        if extra:
            raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")
        try:
            _apply_ini(cfg, parser)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        target = cfg
        *head, last = key.split(".")
        for h in head:
            target = getattr(target, h)
        if not hasattr(target, last):
            raise ConfigError(f"unknown setting {key!r}")
        setattr(target, last, value)
    return cfg.validate()


def _apply_ini(cfg: ExperimentConfig, p: configparser.ConfigParser) -> None:
    m = cfg.mesh
    if p.has_section("mesh"):
        s = p["mesh"]
        m.kind = s.get("kind", m.kind)
        for key in ("n_points", "nx", "ny", "nz", "seed"):
            setattr(m, key, s.getint(key, getattr(m, key)))
        m.path = s.get("path", m.path)
    if p.has_section("experiment"):
        s = p["experiment"]
        if "epsilons" in s:
            cfg.epsilons = _floats(s["epsilons"])
        if "preconditioners" in s:
            cfg.preconditioners = _names(s["preconditioners"])
        cfg.bc = s.get("bc", cfg.bc)
        cfg.rhs_field = s.get("field", cfg.rhs_field)
        cfg.rhs_seed = s.getint("rhs_seed", cfg.rhs_seed)
    if p.has_section("solver"):
        s = p["solver"]
        cfg.tol = s.getfloat("tol", cfg.tol)
        cfg.max_iters = s.getint("max_iters", cfg.max_iters)
        cfg.floor_window = s.getint("floor_window", cfg.floor_window)
    if p.has_section("spectrum"):
        s = p["spectrum"]
        cfg.spectrum_mode = s.get("mode", cfg.spectrum_mode)
        cfg.gap_skip = s.getint("gap_skip", cfg.gap_skip)
    if p.has_section("output"):
        cfg.out_dir = p["output"].get("dir", cfg.out_dir)


def make_mesh(spec: MeshSpec) -> TetMesh:
    if spec.kind == "layered":
        return generate_layered_box(spec.nx, spec.ny, spec.nz)
    if spec.kind == "unstructured":
        return generate_unstructured_box(spec.n_points, spec.seed)
    if spec.kind == "multiscale":
        return generate_multiscale_box(spec.n_points, seed=spec.seed)
    if spec.kind == "gmsh":
        return import_gmsh(spec.path).mesh
    raise ConfigError(f"unknown mesh kind {spec.kind!r}")


def make_preconditioner(name: str, system, flops: FlopCounter, extrapolation=None):
    """Build one of the named preconditioners for the constrained system."""
    a = system.a_constrained
    if name == "none":
        return None
    if name == "ssor":
        return SsorPreconditioner(a, 1.0, flops)
    if name == "amg":
        return build_hierarchy(a).as_preconditioner(flops)
    if name in (VL_SOR, VL_ADD):
        return build_preconditioner(system, name, extrapolation, flops=flops)
    raise ConfigError(f"unknown preconditioner {name!r}")


def _fmt_eps(eps: float) -> str:
    return f"{eps:.0e}".replace("+", "")


def trace_filename(eps: float, precond: str) -> str:
    return f"trace_eps{_fmt_eps(eps)}_{precond}.csv"


@dataclass
class StudyResult:
    rows: list[dict]
    files: list[Path]

    @property
    def failures(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]


def run_convergence_study(cfg: ExperimentConfig, mesh: TetMesh | None = None) -> StudyResult:
    """Solve every (epsilon, preconditioner) pair; one trace CSV each plus a summary.

    A failing combination is logged and recorded in the summary, and the
    remaining ones still run.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = make_mesh(cfg.mesh) if mesh is None else mesh
    extrapolation = None
    rows, files = [], []
    for eps in cfg.epsilons:
        system = assemble(mesh, eps)
        b, x_exact = manufactured_rhs(system, cfg.rhs_field, cfg.rhs_seed)
        for name in cfg.preconditioners:
            row = dict.fromkeys(SUMMARY_COLUMNS, "")
            row.update(epsilon=repr(eps), precond=name)
            try:
                if name in (VL_SOR, VL_ADD) and extrapolation is None:
                    # E~ depends only on the mesh
                    extrapolation = build_extrapolation(mesh, None, system)
                fc = FlopCounter()
                m = make_preconditioner(name, system, fc, extrapolation)
                _, trace = pcg(system.a_constrained, b, m, x_exact, cfg.tol, cfg.max_iters,
                               cfg.floor_window, fc)
            except Exception as exc:  # recorded, the study goes on
                log.error("eps=%g %s failed: %s", eps, name, exc)
                row.update(status="failed", message=f"{type(exc).__name__}: {exc}")
                rows.append(row)
                continue
            trace.metadata.update(epsilon=repr(eps), precond=name, n=system.n,
                                  mesh=cfg.mesh.kind)
            path = out / trace_filename(eps, name)
            trace.write_csv(path, cfg.provenance())
            files.append(path)
            its, fl = trace.iterations_to_reduction(1e6), trace.flops_to_reduction(1e6)
            row.update(
                status="ok", iterations=trace.n_iterations, stop_reason=trace.stop_reason,
                iters_to_1e6="" if its is None else its, flops_to_1e6="" if fl is None else fl,
                final_inf_error=repr(trace.inf_errors[-1]),
            )
            rows.append(row)
            log.info("eps=%g %s: %d iterations (%s)", eps, name, trace.n_iterations,
                     trace.stop_reason)
    summary = out / "summary.csv"
    write_summary(rows, summary, cfg.provenance())
    files.append(summary)
    return StudyResult(rows, files)


def write_summary(rows: Sequence[dict], path, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_spectrum_study(cfg: ExperimentConfig, mesh: TetMesh | None = None):
    """Condition numbers over the configured aspect ratios; writes spectrum.csv.

    Zero aspect ratios are dropped (the Neumann limit operator has a
    nontrivial kernel beyond the constants).
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = make_mesh(cfg.mesh) if mesh is None else mesh
    eps = sorted((e for e in cfg.epsilons if e > 0), reverse=True)
    if not eps:
        raise ConfigError("spectrum study needs a positive aspect ratio")
    dense = cfg.spectrum_mode == "dense" or (
        cfg.spectrum_mode == "auto" and mesh.n_nodes <= DENSE_LIMIT
    )
    if dense and mesh.n_nodes > DENSE_LIMIT:
        raise ConfigError(f"dense spectrum needs n <= {DENSE_LIMIT}, mesh has {mesh.n_nodes} nodes")
    sweep = scaling_sweep(mesh, eps, cfg.bc, dense, gap_skip=cfg.gap_skip)
    comments = cfg.provenance()
    if sweep.slope is not None:
        comments.append(f"neumann_slope: {sweep.slope!r}")
    if sweep.limit_cond is not None:
        comments.append(f"limit_cond: {sweep.limit_cond!r}")
        comments.append(f"cond_ratio_to_limit: {sweep.cond_ratio_to_limit!r}")
    path = out / "spectrum.csv"
    write_spectrum_csv(sweep.reports, path, comments)
    return sweep, path

