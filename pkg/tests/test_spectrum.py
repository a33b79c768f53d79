import numpy as np
import pytest

from vlump.fem import assemble, decompose
from vlump.mesh import generate_layered_box, generate_unstructured_box
from vlump.sparse import CsrMatrix
from vlump.spectrum import (
    DIRICHLET_TOP,
    HORIZONTAL_LINEAR_MODES,
    NEUMANN,
    extreme_eigenvalues,
    full_spectrum_dense,
    lanczos_extremes,
    operator_for,
    scaling_sweep,
    spectral_gap_census,
    spectrum_report,
    write_spectrum_csv,
)


def lap1d(n):
    return CsrMatrix.from_dense(2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))


def test_extreme_eigenvalue_examples():
    lo, hi = extreme_eigenvalues(CsrMatrix.from_dense(np.diag([1.0, 2.0, 5.0])))
    assert np.isclose(lo, 1) and np.isclose(hi, 5)
    lo, hi = extreme_eigenvalues(lap1d(3))
    assert np.isclose(lo, 2 - np.sqrt(2), rtol=1e-10) and np.isclose(hi, 2 + np.sqrt(2), rtol=1e-10)
    lo, hi = extreme_eigenvalues(CsrMatrix.identity(7))
    assert lo == pytest.approx(1) and hi == pytest.approx(1)


def test_extreme_eigenvalues_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        extreme_eigenvalues(CsrMatrix.from_dense([[2.0, 1.0], [0.0, 2.0]]))


def test_shift_invert_refines_small_eigenvalue():
    # isolated top, crowded bottom: 40 plain Lanczos steps resolve only lambda_max
    lam = np.concatenate([np.linspace(1e-3, 1.0, 399), [1000.0]])
    a = CsrMatrix.from_dense(np.diag(lam))
    _, _, lo_ok, hi_ok = lanczos_extremes(lambda v: lam * v, lam.size, 1e-8, 40)
    assert hi_ok and not lo_ok
    lo, hi = extreme_eigenvalues(a, tol=1e-8, max_iters=40)
    assert lo == pytest.approx(1e-3, rel=1e-6) and hi == pytest.approx(1000.0)


def test_full_spectrum_examples():
    assert np.allclose(full_spectrum_dense(CsrMatrix.from_dense(np.diag([3.0, 1.0, 2.0]))), [1, 2, 3])
    assert np.allclose(full_spectrum_dense(CsrMatrix.from_dense([[2.0, 1.0], [1.0, 2.0]])), [1, 3])
    with pytest.raises(ValueError):
        full_spectrum_dense(CsrMatrix.identity(2001))


def test_dense_and_lanczos_agree():
    s = assemble(generate_layered_box(2, 2, 2), 1.0)
    lam = full_spectrum_dense(s.a_constrained)
    lo, hi = extreme_eigenvalues(s.a_constrained, tol=1e-10)
    assert lo == pytest.approx(lam[0], rel=1e-8) and hi == pytest.approx(lam[-1], rel=1e-8)
    a, u = operator_for(generate_unstructured_box(300, seed=1), 0.1, NEUMANN)
    lam = full_spectrum_dense(a, u)
    assert lam.size == a.n_rows - 1
    lo, hi = extreme_eigenvalues(a, tol=1e-10, deflate=u)
    assert lo == pytest.approx(lam[0], rel=1e-6) and hi == pytest.approx(lam[-1], rel=1e-6)


def test_deflation_removes_null_vector():
    a = lap1d(5).to_dense()
    a[0, 0] = a[-1, -1] = 1.0  # Neumann 1D Laplacian, kernel = constants
    a = CsrMatrix.from_dense(a)
    lam = full_spectrum_dense(a, np.ones(5))
    exact = 2 - 2 * np.cos(np.arange(1, 5) * np.pi / 5)
    assert np.allclose(lam, exact)
    lo, hi = extreme_eigenvalues(a, tol=1e-12, deflate=np.ones(5))
    assert lo == pytest.approx(exact[0]) and hi == pytest.approx(exact[-1])


def test_gap_census():
    g = spectral_gap_census([1, 2, 100, 101])
    assert (g.gap_ratio, g.below_gap_count) == (50.0, 2)
    g = spectral_gap_census([1, 1000, 1001, 1002, 2000], skip=1)
    assert g.gap_ratio == pytest.approx(2000 / 1002) and g.below_gap_count == 4
    with pytest.raises(ValueError):
        spectral_gap_census([1.0])


def test_layered_gap_counts_surface_modes():
    mesh = generate_layered_box(4, 4, 4)
    m_prime = assemble(mesh, 1.0).surface_dofs.size
    a, u = operator_for(mesh, 0.01, NEUMANN)
    rep = spectrum_report(a, 0.01, NEUMANN, dense=True, deflate=u)
    assert rep.gap.below_gap_count == m_prime
    assert rep.full_spectrum.size == mesh.n_nodes - 1


def test_lambda_min_scales_like_eps_squared():
    mesh = generate_layered_box(4, 4, 4)
    lam = {}
    for eps in (1.0, 0.1, 0.01, 0.001):
        a, u = operator_for(mesh, eps, NEUMANN)
        lam[eps] = extreme_eigenvalues(a, 1e-10, deflate=u)
    for eps in (0.1, 0.01):
        assert lam[eps / 10][0] <= 0.02 * lam[eps][0]
    a0 = assemble(mesh, 0.0).a_eps
    hi0 = extreme_eigenvalues(a0, 1e-10, deflate=np.ones(a0.n_rows))[1]
    for eps in (1.0, 0.1, 0.01):
        assert lam[eps][1] >= hi0 * (1 - 1e-10)


def test_dirichlet_top_bounds():
    mesh = generate_layered_box(4, 4, 4)
    lo0, hi0 = extreme_eigenvalues(decompose(assemble(mesh, 0.0)).interior, 1e-10)
    for eps in (0.1, 0.01):
        lo, hi = extreme_eigenvalues(decompose(assemble(mesh, eps)).interior, 1e-10)
        assert lo >= lo0 * (1 - 1e-9)
        assert hi <= 2 * hi0


def test_scaling_sweep_examples(tmp_path):
    mesh = generate_layered_box(4, 4, 4)
    neu = scaling_sweep(mesh, [1.0, 0.1, 0.01], NEUMANN)
    assert -2.3 <= neu.slope <= -1.7
    dirichlet = scaling_sweep(mesh, [0.1, 0.01, 0.001], DIRICHLET_TOP)
    assert dirichlet.cond_ratio_to_limit <= 2.2
    single = scaling_sweep(mesh, [1.0], NEUMANN)
    assert len(single.reports) == 1 and single.slope is None
    with pytest.raises(ValueError):
        scaling_sweep(mesh, [0.1, 1.0])
    with pytest.raises(ValueError):
        operator_for(mesh, 1.0, "robin")

    path = tmp_path / "s.csv"
    write_spectrum_csv(single.reports, path, comments=["hash: x"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# hash: x"
    assert lines[1] == "epsilon,bc,lambda_min,lambda_max,cond,gap_ratio,below_gap_count"
    assert len(lines) == 3


def test_unstructured_linear_modes_lead_the_spectrum():
    # x and y are z-independent P1 fields on any mesh, so they sit far below the rest
    a, u = operator_for(generate_unstructured_box(300, seed=0), 0.001, NEUMANN)
    lam = full_spectrum_dense(a, u)
    assert spectral_gap_census(lam).below_gap_count == HORIZONTAL_LINEAR_MODES
    assert spectral_gap_census(lam, HORIZONTAL_LINEAR_MODES).gap_ratio < 10
