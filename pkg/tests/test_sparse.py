import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlump.sparse import (
    CsrMatrix,
    FlopCounter,
    extract_submatrix,
    read_matrix_market,
    sor_flops,
    sor_sweep,
    spmv,
    triple_product,
    write_matrix_market,
)


def random_sparse(rng, n_rows, n_cols, density=0.3):
    a = rng.standard_normal((n_rows, n_cols))
    a[rng.random((n_rows, n_cols)) > density] = 0.0
    return a


def test_spmv_examples():
    assert np.array_equal(spmv(CsrMatrix.identity(3), [1.0, 2.0, 3.0]), [1, 2, 3])
    zero = CsrMatrix.from_dense(np.zeros((2, 2)))
    assert np.array_equal(spmv(zero, [4.0, 5.0]), [0, 0])
    a = CsrMatrix.from_dense([[2, 1], [1, 2]])
    assert np.array_equal(spmv(a, [1.0, 1.0]), [3, 3])


def test_spmv_dimension_mismatch():
    with pytest.raises(ValueError):
        spmv(CsrMatrix.identity(3), np.ones(2))


def test_spmv_counts_two_flops_per_nonzero():
    a = CsrMatrix.from_dense([[2, 1, 0], [1, 2, 0], [0, 0, 5]])
    fc = FlopCounter()
    spmv(a, np.ones(3), flops=fc)
    assert fc.total == 2 * a.nnz == 10


def test_csr_invariants_rejected():
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 3]), np.array([1, 0, 1]), np.ones(3))
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 1, 2]), np.array([0, 2]), np.ones(2))
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.ones(2))


def test_triplets_merge_duplicates():
    a = CsrMatrix.from_triplets([0, 0, 1, 0], [1, 1, 0, 0], [1.0, 2.0, 5.0, 4.0], (2, 2))
    assert np.array_equal(a.to_dense(), [[4, 3], [5, 0]])
    assert a.nnz == 3


def test_triple_product_examples():
    lap = np.array([[1, -1, 0, 0], [-1, 2, -1, 0], [0, -1, 2, -1], [0, 0, -1, 1]], float)
    a = CsrMatrix.from_dense(lap)
    assert np.array_equal(triple_product(CsrMatrix.identity(4), a).to_dense(), lap)

    ones = CsrMatrix.from_dense(np.ones((2, 1)))
    assert np.array_equal(triple_product(ones, CsrMatrix.identity(2)).to_dense(), [[2.0]])

    # aggregates {0,1} and {2,3}
    t = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float)
    got = triple_product(CsrMatrix.from_dense(t), a).to_dense()
    assert np.allclose(got, t.T @ lap @ t)
    assert np.allclose(got, [[1, -1], [-1, 1]])


def test_triple_product_dimension_mismatch():
    with pytest.raises(ValueError):
        triple_product(CsrMatrix.identity(3), CsrMatrix.identity(4))


def test_sor_diagonal_exact():
    a = CsrMatrix.from_dense([[2, 0], [0, 4]])
    x = np.zeros(2)
    sor_sweep(a, x, [2.0, 4.0], 1.0, "forward")
    assert np.array_equal(x, [1, 1])


def test_sor_hand_gauss_seidel():
    a = CsrMatrix.from_dense([[2, 1], [1, 2]])
    b = np.array([3.0, 3.0])
    x = np.zeros(2)
    sor_sweep(a, x, b, 1.0, "forward")
    assert np.allclose(x, [1.5, 0.75], rtol=0, atol=1e-15)
    r_fwd = np.linalg.norm(b - a.to_dense() @ x)
    sor_sweep(a, x, b, 1.0, "backward")
    # backward sweep: x1 = (3 - 1.5)/2 = 0.75, x0 = (3 - 0.75)/2 = 1.125
    assert np.allclose(x, [1.125, 0.75])
    assert np.linalg.norm(b - a.to_dense() @ x) < r_fwd


def test_sor_errors_and_flops():
    a = CsrMatrix.from_dense([[1, 1], [1, 0]], drop_zeros=False)
    with pytest.raises(ZeroDivisionError, match="row 1"):
        sor_sweep(a, np.zeros(2), np.ones(2))
    good = CsrMatrix.from_dense([[4, 1, 0], [1, 4, 1], [0, 1, 4]])
    with pytest.raises(ValueError):
        sor_sweep(good, np.zeros(3), np.ones(3), omega=2.0)
    fc = FlopCounter()
    sor_sweep(good, np.zeros(3), np.ones(3), flops=fc)
    assert fc.total == sor_flops(good) == 2 * 7 + 2 * 3


def test_sor_matches_dense_gauss_seidel():
    rng = np.random.default_rng(3)
    m = random_sparse(rng, 12, 12)
    a = m @ m.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x = rng.standard_normal(12)
    x_ref = x.copy()
    omega = 1.3
    for i in range(12):  # textbook SOR, written out directly
        s = b[i] - a[i, :i] @ x_ref[:i] - a[i, i + 1:] @ x_ref[i + 1:]
        x_ref[i] = (1 - omega) * x_ref[i] + omega * s / a[i, i]
    sor_sweep(CsrMatrix.from_dense(a), x, b, omega, "forward")
    assert np.allclose(x, x_ref, rtol=1e-14, atol=1e-14)


def test_extract_submatrix_examples():
    lap = CsrMatrix.from_dense(np.diag([2.0] * 4) - np.eye(4, k=1) - np.eye(4, k=-1))
    assert np.array_equal(extract_submatrix(lap, [1, 2], [1, 2]).to_dense(), [[2, -1], [-1, 2]])
    eye = CsrMatrix.identity(3)
    assert np.array_equal(extract_submatrix(eye, [0, 2], [0, 2]).to_dense(), np.eye(2))
    full = extract_submatrix(lap, range(4), range(4))
    assert np.array_equal(full.to_dense(), lap.to_dense())
    with pytest.raises(IndexError):
        extract_submatrix(eye, [0, 3], [0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_kernels_match_dense(n, m, seed):
    rng = np.random.default_rng(seed)
    a = random_sparse(rng, n, n)
    a = a + a.T
    p = random_sparse(rng, n, m)
    x = rng.standard_normal(n)
    ca, cp = CsrMatrix.from_dense(a), CsrMatrix.from_dense(p)

    y = spmv(ca, x)
    assert np.allclose(y, a @ x, rtol=0, atol=1e-13 * max(1.0, np.abs(a).sum()))

    ref = p.T @ a @ p
    got = triple_product(cp, ca).to_dense()
    scale = max(np.abs(ref).max(), 1e-300)
    assert np.abs(got - ref).max() <= 1e-12 * scale
    assert np.abs(got - got.T).max() <= 1e-12 * scale

    rows = rng.permutation(n)[: rng.integers(1, n + 1)]
    cols = rng.permutation(n)[: rng.integers(1, n + 1)]
    assert np.array_equal(extract_submatrix(ca, rows, cols).to_dense(), a[np.ix_(rows, cols)])


def test_matrix_market_roundtrip(tmp_path):
    a = CsrMatrix.from_dense([[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
    write_matrix_market(tmp_path / "a.mtx", a, symmetric=True)
    text = (tmp_path / "a.mtx").read_text()
    assert text.startswith("%%MatrixMarket matrix coordinate real symmetric")
    assert np.array_equal(read_matrix_market(tmp_path / "a.mtx").to_dense(), a.to_dense())
    write_matrix_market(tmp_path / "g.mtx", a)
    assert "general" in (tmp_path / "g.mtx").read_text().splitlines()[0]
    assert np.array_equal(read_matrix_market(tmp_path / "g.mtx").to_dense(), a.to_dense())
