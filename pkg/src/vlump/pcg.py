"""Preconditioned conjugate gradients with exact-error instrumentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .sparse import FLOPS, CsrMatrix, FlopCounter, check_diagonal, sor_sweep, spmv

Preconditioner = Callable[[np.ndarray], np.ndarray]


class NotPositiveDefiniteError(ArithmeticError):
    def __init__(self, iteration: int, curvature: float):
        super().__init__(f"p^T A p = {curvature:.3e} <= 0 at iteration {iteration}")
        self.iteration = iteration


def inf_error(x, x_exact) -> float:
    x, x_exact = np.asarray(x), np.asarray(x_exact)
    if x.shape != x_exact.shape:
        raise ValueError("vectors differ in length")
    return float(np.max(np.abs(x - x_exact))) if x.size else 0.0


@dataclass
class ConvergenceTrace:
    iterations: list[int] = field(default_factory=list)
    inf_errors: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    flops: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    stop_reason: str = ""
    floor: float | None = None
    alphas: list[float] = field(default_factory=list, repr=False)
    betas: list[float] = field(default_factory=list, repr=False)

    def record(self, it, err, res, fl):
        self.iterations.append(it)
        self.inf_errors.append(err)
        self.residuals.append(res)
        self.flops.append(fl)

    @property
    def n_iterations(self) -> int:
        return self.iterations[-1]

    def _first_below(self, factor: float) -> int | None:
        err = np.asarray(self.inf_errors)
        hit = np.flatnonzero(err <= err[0] / factor)
        return int(hit[0]) if hit.size else None

    def iterations_to_reduction(self, factor: float = 1e6) -> int | None:
        """First iteration whose inf-error is below the initial one / factor."""
        k = self._first_below(factor)
        return None if k is None else self.iterations[k]

    def flops_to_reduction(self, factor: float = 1e6) -> int | None:
        k = self._first_below(factor)
        return None if k is None else self.flops[k]

    def condition_estimate(self) -> tuple[float, float]:
        """Extreme Ritz values of the preconditioned operator from the CG coefficients."""
        a, b = np.asarray(self.alphas), np.asarray(self.betas)
        if a.size == 0:
            raise ValueError("no CG steps recorded")
        diag = 1.0 / a
        diag[1:] += b[: a.size - 1] / a[:-1]
        off = np.sqrt(b[: a.size - 1]) / a[:-1]
        theta = scipy.linalg.eigh_tridiagonal(diag, off, eigvals_only=True)
        return float(theta[0]), float(theta[-1])

    def write_csv(self, path, comments=()) -> None:
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            for key in sorted(self.metadata):
                fh.write(f"# {key}: {self.metadata[key]}\n")
            fh.write(f"# stop: {self.stop_reason}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "inf_error", "resid2", "flops"])
            for row in zip(self.iterations, self.inf_errors, self.residuals, self.flops):
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])


def read_trace_csv(path) -> ConvergenceTrace:
    """Read a trace written by ``ConvergenceTrace.write_csv``.

    ``# key: value`` comment lines fill ``metadata``. Errors name the file
    and the 1-based line.
    """
    trace = ConvergenceTrace()
    header_seen = False
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition(": ")
                if sep:
                    trace.metadata[key] = value
                continue
            row = next(csv.reader([line]), [])
            if not header_seen:
                if row != ["iter", "inf_error", "resid2", "flops"]:
                    raise ValueError(f"{path}:{lineno}: bad trace header {row}")
                header_seen = True
                continue
            try:
                it, err, res, fl = row
                trace.record(int(it), float(err), float(res), int(fl))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from exc
    if not header_seen:
        raise ValueError(f"{path}: empty trace, no header")
    trace.stop_reason = trace.metadata.pop("stop", "")
    return trace


def pcg(
    a: CsrMatrix | Callable[[np.ndarray], np.ndarray],
    b,
    precond: Preconditioner | None = None,
    x_exact=None,
    tol: float = 1e-10,
    max_iters: int = 1000,
    floor_window: int = 25,
    flops: FlopCounter | None = None,
    floor_residual: float = 1e-10,
) -> tuple[np.ndarray, ConvergenceTrace]:
    """Solve A x = b from x = 0.

    Without ``x_exact`` the iteration stops once sqrt(r.z / r0.z0) <= tol.
    With it (experiment mode) the iteration instead stops when the
    inf-norm error falls below tol * |x_exact|_inf, or at the round-off
    floor: the best error has not improved for ``floor_window`` iterations
    although the recurrence residual sqrt(r.z / r0.z0) is already below
    ``floor_residual``. The residual condition keeps a stagnation plateau
    (small eigenvalue cluster not yet resolved) from being read as a floor.

    ``a`` may also be a plain matvec callable; its flops are not counted.
    """
    fc = FLOPS if flops is None else flops
    b = np.asarray(b, dtype=np.float64)
    if isinstance(a, CsrMatrix):
        n = a.n_rows
        matvec = lambda v: spmv(a, v, fc)  # noqa: E731
    else:
        n, matvec = b.size, a
    if b.shape != (n,):
        raise ValueError("right-hand side has the wrong length")
    start = fc.total
    x = np.zeros(n)
    r = b.copy()
    trace = ConvergenceTrace()
    experiment = x_exact is not None
    if experiment:
        x_exact = np.asarray(x_exact, dtype=np.float64)
        target = tol * float(np.max(np.abs(x_exact)))
    err = inf_error(x, x_exact) if experiment else float("nan")
    trace.record(0, err, float(np.linalg.norm(r)), 0)
    best, since_best = err, 0

    z = precond(r) if precond is not None else r.copy()
    rz = float(r @ z)
    fc.add(2 * n)
    rz0 = rz
    if rz == 0.0:
        trace.stop_reason = "converged"
        return x, trace
    p = z.copy()
    for k in range(1, max_iters + 1):
        q = matvec(p)
        pq = float(p @ q)
        if pq <= 0.0:
            raise NotPositiveDefiniteError(k, pq)
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        z = precond(r) if precond is not None else r.copy()
        rz_new = float(r @ z)
        fc.add(10 * n)
        beta = rz_new / rz
        trace.alphas.append(alpha)
        trace.betas.append(beta)
        err = inf_error(x, x_exact) if experiment else float("nan")
        trace.record(k, err, float(np.linalg.norm(r)), fc.total - start)
        if experiment:
            if err <= target:
                trace.stop_reason = "converged"
                break
            if err < best:
                best, since_best = err, 0
            else:
                since_best += 1
                if since_best >= floor_window and np.sqrt(max(rz_new, 0.0) / rz0) <= floor_residual:
                    trace.stop_reason = "floor"
                    trace.floor = best
                    break
        elif np.sqrt(max(rz_new, 0.0) / rz0) <= tol:
            trace.stop_reason = "converged"
            break
        if rz_new == 0.0:
            trace.stop_reason = "converged"
            break
        p = z + beta * p
        rz = rz_new
    else:
        trace.stop_reason = "max_iters"
    return x, trace


class SsorPreconditioner:
    """One forward then one backward SOR sweep from a zero guess."""

    name = "ssor"

    def __init__(self, a: CsrMatrix, omega: float = 1.0, flops: FlopCounter | None = None):
        check_diagonal(a)
        self.a = a
        self.omega = omega
        self.flops = flops

    def __call__(self, r):
        z = np.zeros(self.a.n_rows)
        sor_sweep(self.a, z, r, self.omega, "forward", self.flops)
        sor_sweep(self.a, z, r, self.omega, "backward", self.flops)
        return z


def ssor_preconditioner(a: CsrMatrix, omega: float = 1.0) -> SsorPreconditioner:
    return SsorPreconditioner(a, omega)
