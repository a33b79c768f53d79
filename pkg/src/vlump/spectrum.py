"""Eigenvalue estimates for the condition-number experiments."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .fem import assemble, decompose
from .mesh import TetMesh
from .sparse import CsrMatrix, FlopCounter

log = logging.getLogger(__name__)

NEUMANN = "neumann"
DIRICHLET_TOP = "dirichlet_top"
DENSE_LIMIT = 2000


class EigenvalueConvergenceError(RuntimeError):
    def __init__(self, msg, lambda_min, lambda_max):
        super().__init__(f"{msg} (best estimates {lambda_min:.6g}, {lambda_max:.6g})")
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max


def lanczos_extremes(
    matvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float,
    max_iters: int,
    seed: int = 0,
    deflate: np.ndarray | None = None,
):
    """Lanczos with full reorthogonalisation on a symmetric operator.

    Returns ``(theta_min, theta_max, min_converged, max_converged)``. An
    extreme Ritz value counts as converged when its residual bound
    |beta_k s_k| is at most ``tol`` times the largest Ritz value magnitude.
    With a unit vector ``deflate`` the iteration runs in its orthogonal
    complement.
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    dim = n
    if deflate is not None:
        q -= (deflate @ q) * deflate
        dim = n - 1
    q /= np.linalg.norm(q)
    max_iters = min(max_iters, dim)
    basis = np.empty((max_iters, n))
    alphas, betas = [], []
    beta = 0.0
    q_prev = np.zeros(n)
    lo = hi = 0.0
    lo_ok = hi_ok = False
    for k in range(max_iters):
        basis[k] = q
        w = matvec(q) - beta * q_prev
        if deflate is not None:
            w -= (deflate @ w) * deflate
        alpha = float(q @ w)
        w -= alpha * q
        for _ in range(2):
            w -= basis[: k + 1].T @ (basis[: k + 1] @ w)
            if deflate is not None:
                w -= (deflate @ w) * deflate
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        if k == 0:
            theta, s = np.array([alpha]), np.ones((1, 1))
        else:
            theta, s = scipy.linalg.eigh_tridiagonal(np.array(alphas), np.array(betas))
        lo, hi = float(theta[0]), float(theta[-1])
        scale = max(abs(lo), abs(hi))
        # tiny beta: the Krylov space is invariant and its Ritz values are exact
        exhausted = beta <= 1e-10 * scale or k + 1 == dim
        lo_ok = exhausted or beta * abs(s[-1, 0]) <= tol * scale
        hi_ok = exhausted or beta * abs(s[-1, -1]) <= tol * scale
        # a small eigenvalue needs accuracy relative to itself
        lo_ok = lo_ok and (exhausted or beta * abs(s[-1, 0]) <= tol * abs(lo))
        if (lo_ok and hi_ok) or exhausted:
            break
        betas.append(beta)
        q_prev, q = q, w / beta
    return lo, hi, lo_ok, hi_ok


def _unit(deflate, n):
    if deflate is None:
        return None
    u = np.asarray(deflate, dtype=np.float64)
    if u.shape != (n,):
        raise ValueError("deflation vector has the wrong length")
    return u / np.linalg.norm(u)


def extreme_eigenvalues(
    a: CsrMatrix, tol: float = 1e-8, max_iters: int = 1000, deflate=None
) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix.

    Plain Lanczos first; if the smallest Ritz value has not converged,
    it is refined by Lanczos on the inverse with CG inner solves. With
    ``deflate`` (a null vector of a singular ``a``) the extremes are those
    of ``a`` on the orthogonal complement of that vector.
    """
    if a.n_rows != a.n_cols:
        raise ValueError("matrix must be square")
    if a.max_asymmetry() > 1e-10:
        raise ValueError("matrix is not symmetric")
    u = _unit(deflate, a.n_rows)
    s = a.to_scipy()
    lo, hi, lo_ok, hi_ok = lanczos_extremes(lambda v: s @ v, a.n_rows, tol, max_iters, deflate=u)
    if not hi_ok:
        raise EigenvalueConvergenceError("largest eigenvalue did not converge", lo, hi)
    if not lo_ok:
        lo = _shift_invert_min(a, tol, max_iters, lo, hi, u)
    return lo, hi


def _shift_invert_min(a: CsrMatrix, tol, max_iters, lo, hi, u=None) -> float:
    from .pcg import pcg

    if lo <= 0:
        raise EigenvalueConvergenceError("no positive lower Ritz value to refine", lo, hi)
    scratch = FlopCounter()
    s = a.to_scipy()

    def op(v):
        w = s @ v
        return w if u is None else w - (u @ w) * u

    def solve(v):
        # singular but consistent when deflated: CG stays in the complement
        x, _ = pcg(op, v, tol=1e-10, max_iters=20 * a.n_rows, flops=scratch)
        return x

    mu_lo, mu_hi, _, mu_ok = lanczos_extremes(solve, a.n_rows, tol, max_iters, deflate=u)
    if not mu_ok or mu_hi <= 0:
        raise EigenvalueConvergenceError("shift-invert refinement did not converge", lo, hi)
    return 1.0 / mu_hi


def full_spectrum_dense(a: CsrMatrix, deflate=None) -> np.ndarray:
    """All eigenvalues, ascending, via LAPACK tridiagonal QL/QR (dsyev).

    With ``deflate`` the n - 1 eigenvalues of ``a`` restricted to the
    orthogonal complement of that vector.
    """
    if a.n_rows > DENSE_LIMIT:
        raise ValueError(f"dense spectrum limited to n <= {DENSE_LIMIT}, got {a.n_rows}")
    if a.max_asymmetry() > 1e-10:
        raise ValueError("matrix is not symmetric")
    d = a.to_dense()
    u = _unit(deflate, a.n_rows)
    if u is not None:
        q = scipy.linalg.null_space(u[None, :])
        d = q.T @ d @ q
    return scipy.linalg.eigvalsh(d, driver="ev")


@dataclass(frozen=True)
class GapCensus:
    gap_ratio: float
    below_gap_count: int


#: Horizontally linear fields are z-independent P1 functions on every mesh,
#: so besides the constant they lie in the kernel of A_0 whatever the
#: vertical structure. Skip their gap when looking for the mode cluster.
HORIZONTAL_LINEAR_MODES = 2


def spectral_gap_census(spectrum: Sequence[float], skip: int = 0) -> GapCensus:
    """Largest ratio between consecutive eigenvalues and how many lie below it.

    Gaps directly above the ``skip`` smallest eigenvalues or inside them
    are ignored; ``below_gap_count`` still counts from the bottom.
    """
    lam = np.asarray(spectrum, dtype=np.float64)
    if lam.size < 2 + skip:
        raise ValueError("need at least two eigenvalues beyond the skipped ones")
    if lam[0] <= 0:
        raise ValueError("gap census needs a positive spectrum")
    ratios = lam[1:] / lam[:-1]
    k = skip + int(np.argmax(ratios[skip:]))
    return GapCensus(float(ratios[k]), k + 1)


@dataclass
class SpectrumReport:
    epsilon: float
    bc: str
    lambda_min: float
    lambda_max: float
    full_spectrum: np.ndarray | None = None
    gap: GapCensus | None = None

    @property
    def cond(self) -> float:
        return self.lambda_max / self.lambda_min


@dataclass
class SweepResult:
    bc: str
    reports: list[SpectrumReport]
    slope: float | None = None            # Neumann: d log(cond) / d log(eps)
    limit_cond: float | None = None       # DirichletTop: cond of the eps = 0 operator
    extra: dict = field(default_factory=dict)

    @property
    def cond_spread(self) -> float:
        c = [r.cond for r in self.reports]
        return max(c) / min(c)

    @property
    def cond_ratio_to_limit(self) -> float | None:
        if self.limit_cond is None:
            return None
        return max(r.cond for r in self.reports) / self.limit_cond


def operator_for(mesh: TetMesh, epsilon: float, bc: str) -> tuple[CsrMatrix, np.ndarray | None]:
    """The matrix whose spectrum is studied and the null vector to deflate.

    Neumann: the singular all-Neumann A_eps with the constant deflated,
    i.e. the operator on mean-zero vectors. Pinning a node instead would
    add one isolated eigenvalue, set by the pin rather than by eps.
    DirichletTop: the interior block, nonsingular.
    """
    system = assemble(mesh, epsilon)
    if bc == NEUMANN:
        return system.a_eps, np.ones(system.n)
    if bc == DIRICHLET_TOP:
        return decompose(system).interior, None
    raise ValueError(f"unknown boundary condition variant {bc!r}")


def spectrum_report(a: CsrMatrix, epsilon: float, bc: str, dense: bool = False,
                    tol: float = 1e-8, max_iters: int = 2000, deflate=None,
                    gap_skip: int = 0) -> SpectrumReport:
    if dense:
        lam = full_spectrum_dense(a, deflate)
        return SpectrumReport(epsilon, bc, float(lam[0]), float(lam[-1]), lam,
                              spectral_gap_census(lam, gap_skip))
    lo, hi = extreme_eigenvalues(a, tol, max_iters, deflate)
    return SpectrumReport(epsilon, bc, lo, hi)


def scaling_sweep(
    mesh: TetMesh,
    epsilons: Sequence[float],
    bc: str = NEUMANN,
    dense: bool = False,
    tol: float = 1e-8,
    max_iters: int = 2000,
    gap_skip: int = 0,
) -> SweepResult:
    """Condition numbers over a descending list of aspect ratios."""
    eps = [float(e) for e in epsilons]
    if any(e <= 0 for e in eps):
        raise ValueError("aspect ratios must be positive")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("aspect ratios must be strictly descending")
    reports = []
    for e in eps:
        a, u = operator_for(mesh, e, bc)
        reports.append(spectrum_report(a, e, bc, dense, tol, max_iters, u, gap_skip))
    result = SweepResult(bc, reports)
    if bc == NEUMANN and len(eps) > 1:
        result.slope = float(np.polyfit(np.log(eps), np.log([r.cond for r in reports]), 1)[0])
    if bc == DIRICHLET_TOP:
        a0, _ = operator_for(mesh, 0.0, bc)
        result.limit_cond = spectrum_report(a0, 0.0, bc, dense, tol, max_iters).cond
    return result


CSV_COLUMNS = ("epsilon", "bc", "lambda_min", "lambda_max", "cond", "gap_ratio", "below_gap_count")


def write_spectrum_csv(reports: Sequence[SpectrumReport], path, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            gap = r.gap
            w.writerow([
                repr(r.epsilon), r.bc, repr(r.lambda_min), repr(r.lambda_max), repr(r.cond),
                "" if gap is None else repr(gap.gap_ratio),
                "" if gap is None else gap.below_gap_count,
            ])
