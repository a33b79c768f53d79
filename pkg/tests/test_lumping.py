import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings, strategies as st

from vlump.fem import assemble, decompose, manufactured_rhs
from vlump.lumping import (
    VL_ADD,
    VL_SOR,
    ProjectionError,
    SurfaceLocator,
    VlumpPreconditioner,
    build_extrapolation,
    build_preconditioner,
    exact_extrapolation,
    reference_solve,
    schur_solve_reference,
    surface_candidates,
    two_term_solve,
)
from vlump.mesh import SurfaceMesh, generate_layered_box, generate_unstructured_box
from vlump.pcg import pcg
from vlump.sparse import CsrMatrix, triple_product


def unit_triangle():
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return SurfaceLocator(SurfaceMesh(np.arange(3), np.array([[0, 1, 2]]), xy))


def test_barycentric_examples():
    loc = unit_triangle()
    pts = np.array([[0.0, 0.0], [0.25, 0.25], [1.0, 0.0]])
    tri = loc.locate(pts)
    assert tri.tolist() == [0, 0, 0]
    w = loc.weights(pts, tri)
    assert np.array_equal(w[0], [1.0, 0.0, 0.0])
    assert np.allclose(w[1], [0.5, 0.25, 0.25], rtol=0, atol=1e-15)
    assert np.array_equal(w[2], [0.0, 1.0, 0.0])


def test_projection_outside_footprint():
    loc = unit_triangle()
    with pytest.raises(ProjectionError, match="node 7"):
        loc.locate(np.array([[0.9, 0.9]]), node_ids=[7])
    # a hair outside an edge snaps to the nearest triangle
    assert loc.locate(np.array([[0.5, -1e-10]])).tolist() == [0]


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_weights_reproduce_point(u, v):
    loc = unit_triangle()
    p = np.array([[u * (1 - v), v * (1 - u)]])
    if p.sum() > 1:
        p = 1 - p[:, ::-1]
    w = loc.weights(p, loc.locate(p))
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
    assert np.allclose(w @ loc.tri_xy[0], p, atol=1e-12)


@pytest.fixture(scope="module")
def unstructured():
    return assemble(generate_unstructured_box(400, seed=2), 0.1)


def test_extrapolation_structure(unstructured):
    s = unstructured
    ext = build_extrapolation(s.mesh, None, s)
    full = ext.full.to_dense()
    e = ext.matrix.to_dense()
    assert np.allclose(full.sum(axis=1), 1.0, atol=1e-14)
    assert (full >= 0).all() and (e >= 0).all()
    assert np.array_equal(full[ext.surface_nodes], np.eye(ext.surface_nodes.size))
    assert (np.count_nonzero(full[ext.interior_dofs], axis=1) <= 3).all()
    assert e.shape == (s.n, s.surface_dofs.size)
    assert np.array_equal(ext.surface_dofs, s.surface_dofs)
    assert not e[s.constrained_node].any()
    assert np.array_equal(e[s.surface_dofs], np.eye(s.surface_dofs.size))


def test_layered_extrapolation_is_column_copy():
    mesh = generate_layered_box(3, 3, 4)
    ext = build_extrapolation(mesh)
    full = ext.full.to_dense()
    # every node sits below a surface node: one weight of exactly 1
    assert np.array_equal(np.count_nonzero(full, axis=1), np.ones(mesh.n_nodes))
    top = ext.surface_nodes[np.argmax(full, axis=1)]
    assert np.array_equal(mesh.nodes[top, :2], mesh.nodes[:, :2])


def test_exact_extrapolation_z_independent_at_eps_zero():
    mesh = generate_layered_box(3, 3, 3)
    s = assemble(mesh, 0.0)
    e = exact_extrapolation(s)
    ext = build_extrapolation(mesh, None, s)
    assert np.allclose(e, ext.matrix.to_dense(), atol=1e-10)


def test_exact_extrapolation_gives_schur_complement(unstructured):
    s = unstructured
    e = exact_extrapolation(s)
    blk = decompose(s)
    c = blk.coupling.to_dense()
    schur = blk.surface_block.to_dense() - c @ np.linalg.solve(blk.interior.to_dense(), c.T)
    galerkin = e.T @ s.a_constrained.to_dense() @ e
    assert np.abs(galerkin - schur).max() <= 1e-11 * np.abs(schur).max()
    with pytest.raises(ValueError, match="dense oracle"):
        exact_extrapolation(assemble(generate_layered_box(8, 8, 8), 1.0))


def test_reference_solvers_agree(unstructured):
    s = unstructured
    b = np.random.default_rng(0).standard_normal(s.n)
    x = np.linalg.solve(s.a_constrained.to_dense(), b)
    assert np.allclose(schur_solve_reference(s, b), x, rtol=0, atol=1e-10 * np.abs(x).max())
    assert np.allclose(two_term_solve(s, b), x, rtol=0, atol=1e-10 * np.abs(x).max())


@pytest.mark.parametrize("wrap", [False, True])
def test_exact_components_give_exact_inverse(unstructured, wrap):
    s = unstructured
    e = exact_extrapolation(s)
    a = s.a_constrained.to_dense()
    coarse = np.linalg.inv(e.T @ a @ e)
    interior = np.linalg.inv(decompose(s).interior.to_dense())
    p = VlumpPreconditioner(
        s, CsrMatrix.from_dense(e), lambda r: coarse @ r, VL_ADD, lambda r: interior @ r,
        sor_wrap=wrap,
    )
    r = np.random.default_rng(1).standard_normal(s.n)
    x = np.linalg.solve(a, r)
    assert np.allclose(p(r), x, rtol=0, atol=1e-9 * np.abs(x).max())


@pytest.mark.parametrize("variant", [VL_SOR, VL_ADD])
@pytest.mark.parametrize("eps", [1.0, 0.01])
def test_preconditioner_symmetric_positive(variant, eps):
    s = assemble(generate_unstructured_box(900, seed=4), eps)
    m = build_preconditioner(s, variant, coarsest_cap=30)
    rng = np.random.default_rng(2)
    assert np.array_equal(m(np.zeros(s.n)), np.zeros(s.n))
    for _ in range(4):
        r1, r2 = rng.standard_normal((2, s.n))
        z1, z2 = m(r1), m(r2)
        assert abs(r2 @ z1 - r1 @ z2) <= 1e-10 * np.linalg.norm(r1) * np.linalg.norm(z2)
        assert r1 @ z1 > 0
        assert np.allclose(m(2 * r1 - r2), 2 * z1 - z2, rtol=0, atol=1e-12 * np.abs(z1).max())
    with pytest.raises(ValueError):
        m(np.zeros(s.n + 1))


def test_preconditioner_argument_checks(unstructured):
    s = unstructured
    e = build_extrapolation(s.mesh, None, s).matrix
    with pytest.raises(ValueError, match="variant"):
        VlumpPreconditioner(s, e, lambda r: r, "vl-xyz")
    with pytest.raises(ValueError, match="interior"):
        VlumpPreconditioner(s, e, lambda r: r, VL_ADD)
    with pytest.raises(ValueError, match="rows"):
        VlumpPreconditioner(s, CsrMatrix.identity(3), lambda r: r)
    with pytest.raises(ValueError):
        surface_candidates(s.mesh, s.surface_dofs, "quadratic")
    assert surface_candidates(s.mesh, s.surface_dofs, "constant") is None
    c = surface_candidates(s.mesh, s.surface_dofs)
    assert c.shape == (s.surface_dofs.size, 3) and np.allclose(c[:, 1:].mean(axis=0), 0)


def test_exports(unstructured, tmp_path):
    s = unstructured
    ext = build_extrapolation(s.mesh, None, s)
    ext.write_matrix_market(tmp_path / "e.mtx")
    back = scipy.io.mmread(str(tmp_path / "e.mtx")).toarray()
    assert np.array_equal(back, ext.matrix.to_dense())

    p = build_preconditioner(s, VL_ADD, ext, coarsest_cap=30)
    p.write_build_report(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "key,value" and lines[1] == "variant,vl-add"
    keys = [ln.split(",")[0] for ln in lines[1:]]
    assert {"coarse_size", "e_tilde_nnz", "interior_levels"} <= set(keys)


def test_high_precision_oracles():
    # at eps = 1e-4 float64 solves keep only a few digits; 30-digit arithmetic keeps all
    s = assemble(generate_layered_box(2, 2, 3), 1e-4)
    b = np.random.default_rng(3).standard_normal((s.n, 2))
    x = reference_solve(s, b, digits=30)
    assert np.abs(s.a_constrained.to_dense() @ x - b).max() <= 1e-14 * np.abs(x).max()
    assert np.allclose(two_term_solve(s, b, digits=30), x, rtol=1e-13, atol=0)
    assert np.allclose(schur_solve_reference(s, b[:, 0], digits=30), x[:, 0], rtol=1e-13, atol=0)
    e = exact_extrapolation(s, digits=30)
    assert np.allclose(e, exact_extrapolation(s), rtol=0, atol=1e-8)


@pytest.mark.parametrize("eps", [1.0, 1e-2, 1e-4])
def test_coarse_operator_spd(eps):
    s = assemble(generate_unstructured_box(600, seed=6), eps)
    e = build_extrapolation(s.mesh, None, s).matrix
    coarse = triple_product(e, s.a_constrained)
    assert coarse.max_asymmetry() <= 1e-12 * np.abs(coarse.values).max()
    assert np.linalg.eigvalsh(coarse.to_dense())[0] > 0


def test_preconditioned_condition_eps_independent():
    mesh = generate_unstructured_box(5000, seed=0)
    ext = build_extrapolation(mesh)
    cond = {}
    for eps in (1e-2, 1e-3):
        s = assemble(mesh, eps)
        b, x = manufactured_rhs(s, "random", seed=1)
        _, tr = pcg(s.a_constrained, b, build_preconditioner(s, VL_SOR, ext), tol=1e-10,
                    max_iters=400)
        lo, hi = tr.condition_estimate()
        cond[eps] = hi / lo
    assert cond[1e-3] <= 2 * cond[1e-2]
