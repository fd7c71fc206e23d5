import numpy as np
import pytest
import scipy.sparse as sps
import sympy as sp
from hypothesis import given, settings, strategies as st

import oracle
from nondivfem.assembly import (
    FemContext,
    ShiftedLaplacianSolver,
    SingularSystemError,
    apply_L_constant,
    apply_M_lambda,
    assemble_nondiv,
    assemble_shifted_laplacian,
    constant_A_operator,
    discrete_laplacian,
    export_matrix,
    solve_linear_nondiv,
    sparse_solve,
    stability_ratio,
)
from nondivfem.coefficients import CoefficientError, CoefficientField, Control
from nondivfem.fe_space import FeSpace
from nondivfem.mesh import build_structured
from nondivfem.norms import ExactSolution, w2ph_norm
from nondivfem.problem import load_problem


@pytest.fixture(scope="module")
def ctx4():
    return FemContext(build_structured("unit-square", 4), 2)


def test_identity_coefficient_gives_negative_stiffness(ctx4):
    op, _ = assemble_nondiv(ctx4, Control.make("I", np.eye(2)))
    K = ctx4.stiffness.toarray()
    M = op.matrix.toarray()
    assert np.abs(M + K).max() <= 1e-10 * np.abs(K).max()
    assert op.shape == (ctx4.n_dofs, ctx4.n_dofs)
    assert op.tag == "nondiv"


def test_scaling_leaves_solution_unchanged(ctx4):
    ctl = Control.make("a", ["2 + sin(pi*x)", "0.3*x", "0.3*x", "1"], (0.5, -0.2), "-1 - y", "cos(x)")
    u1 = solve_linear_nondiv(ctx4, ctl).solution.coefficients
    u2 = solve_linear_nondiv(ctx4, ctl.scaled(2.0)).solution.coefficients
    assert np.abs(u1 - u2).max() <= 1e-10 * (1 + np.abs(u1).max())


def test_dense_oracle_for_constant_matrix():
    mesh, r = build_structured("unit-square", 1), 3
    ctx = FemContext(mesh, r)
    V = ctx.space
    labels = V.element.labels
    A0 = np.diag([1.0, 2.0])
    basis = []
    for j in range(V.n_dofs):
        loc = V.function(np.eye(V.n_dofs)[j]).local_coefficients()
        basis.append([oracle.lagrange_cell_polys(mesh, k, r, labels, [sp.Integer(int(round(v))) for v in loc[k]])
                      for k in range(mesh.n_cells)])
    dense = np.zeros((V.n_dofs, V.n_dofs))
    for j, phi in enumerate(basis):
        hxx = oracle.lift_exact(mesh, [sp.diff(p, oracle.X) for p in phi], 0, r)
        hyy = oracle.lift_exact(mesh, [sp.diff(p, oracle.Y) for p in phi], 1, r)
        for i, psi in enumerate(basis):
            dense[i, j] = float(sum(oracle.integrate_cell((hxx[k] + 2 * hyy[k]) * psi[k], oracle.cell_vertices(mesh, k))
                                    for k in range(mesh.n_cells)))
    M = constant_A_operator(ctx, A0).matrix.toarray()
    assert np.allclose(M, dense, atol=1e-12)
    w = np.arange(1.0, V.n_dofs + 1)
    rep = apply_L_constant(ctx, A0, w).coefficients
    assert np.allclose(ctx.mass @ rep, dense @ w, atol=1e-12)


def test_apply_L_constant_linear_and_matches_weak_form(ctx4, rng):
    A0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    a, b = rng.standard_normal((2, ctx4.n_dofs))
    La, Lb = apply_L_constant(ctx4, A0, a).coefficients, apply_L_constant(ctx4, A0, b).coefficients
    Lab = apply_L_constant(ctx4, A0, 3 * a - 2 * b).coefficients
    assert np.allclose(Lab, 3 * La - 2 * Lb, atol=1e-12 * np.abs(Lab).max())
    cd = ctx4.space.cell_data()
    KA = ctx4.space._assemble_local(np.einsum("cq,cqai,ij,cqbj->cba", cd.jxw, cd.dphi, A0, cd.dphi))
    assert np.allclose(ctx4.mass @ La, -(KA @ a), atol=1e-10 * np.abs(KA @ a).max())


def test_shifted_laplacian_properties(ctx4, rng):
    op = assemble_shifted_laplacian(ctx4, 1.0)
    m = op.matrix
    assert abs(m - m.T).max() == 0
    assert np.linalg.eigvalsh(m.toarray()).max() < 0
    with pytest.raises(ValueError):
        assemble_shifted_laplacian(ctx4, 0.0)
    assert np.all(apply_M_lambda(ctx4, 2.0, np.zeros(ctx4.n_dofs)).coefficients == 0)


@pytest.mark.parametrize("lam", [0.5, 1.0, 7.0])
def test_shifted_solve_inverts_laplacian_minus_lambda(ctx4, rng, lam):
    w = rng.standard_normal(ctx4.n_dofs)
    g = discrete_laplacian(ctx4, w).coefficients - lam * w
    back = apply_M_lambda(ctx4, lam, g).coefficients
    assert np.allclose(back, w, atol=1e-9)
    solver = ShiftedLaplacianSolver(ctx4, lam)
    load = rng.standard_normal(ctx4.n_dofs)
    assert np.allclose(solver.solve_functional(load), -solver.solve_positive(load))


def test_poisson_reduction():
    prob = load_problem("poisson-square")
    ctx = FemContext(build_structured("unit-square", 8), 2)
    rep = solve_linear_nondiv(ctx, prob.control, prob.exact)
    # standard Galerkin Poisson system -(grad u, grad v) = (f, v)
    F = ctx.load(prob.control.f.evaluate(ctx.points[:, 0], ctx.points[:, 1]))
    u = sps.linalg.spsolve(sps.csc_matrix(-ctx.stiffness), F)
    assert np.abs(rep.solution.coefficients - u).max() <= 1e-9
    assert rep.residual_ok
    coarse = solve_linear_nondiv(FemContext(build_structured("unit-square", 4), 2), prob.control, prob.exact)
    assert np.log2(coarse.errors["w2ph"] / rep.errors["w2ph"]) >= 0.9


def test_discontinuous_coefficient_stability():
    prob = load_problem("discontinuous-A-cordes")
    norms, ratios = [], []
    rng = np.random.default_rng(3)
    for n in (4, 8, 16):
        ctx = FemContext(build_structured("unit-square", n), 2)
        rep = solve_linear_nondiv(ctx, prob.control)
        assert rep.residual_ok
        norms.append(w2ph_norm(rep.solution))
        op, _ = assemble_nondiv(ctx, prob.control)
        ratios.append(max(stability_ratio(ctx, prob.control, rng.standard_normal(ctx.n_dofs), op) for _ in range(10)))
    assert max(norms) / min(norms) < 1.5
    assert max(ratios) / min(ratios) < 2


def test_coefficient_failure_names_the_point(ctx4):
    with pytest.raises(CoefficientError, match="elliptic"):
        assemble_nondiv(ctx4, Control.make("bad", ["x - 0.5", "0", "0", "1"]))
    with pytest.raises(CoefficientError, match="non-finite"):
        assemble_nondiv(ctx4, Control.make("nan", np.eye(2), f="sqrt(x - 0.5)"))


def test_singular_system_reports_diagnostics():
    m = sps.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(SingularSystemError) as info:
        sparse_solve(m, np.ones(2))
    assert info.value.diagnostics["zero_rows"] == 1


def test_iterative_fallback_agrees(ctx4):
    op, F = assemble_nondiv(ctx4, Control.make("a", ["1 + 0.4*sin(pi*x)*sin(pi*y)", "0", "0", "1"], f="1"))
    direct, m1 = sparse_solve(op.matrix, F)
    iterative, m2 = sparse_solve(op.matrix, F, direct_limit=0)
    assert (m1, m2) == ("splu", "bicgstab")
    assert np.allclose(direct, iterative, atol=1e-8)


def test_export_matrix(tmp_path, ctx4):
    op = constant_A_operator(ctx4, np.eye(2))
    export_matrix(op, tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    n, m, nnz = map(int, lines[0].split())
    assert (n, m, nnz) == (*op.shape, op.matrix.nnz)
    r, c, v = lines[1].split()
    assert float(v) == op.matrix[int(r), int(c)]


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 5), st.floats(0.2, 5), st.floats(-0.9, 0.9))
def test_identity_property_random_constant_matrices(a, d, rho):
    ctx = FemContext(build_structured("unit-square", 2), 2)
    off = rho * np.sqrt(a * d)
    A0 = np.array([[a, off], [off, d]])
    M = constant_A_operator(ctx, A0).matrix.toarray()
    cd = ctx.space.cell_data()
    KA = ctx.space._assemble_local(np.einsum("cq,cqai,ij,cqbj->cba", cd.jxw, cd.dphi, A0, cd.dphi)).toarray()
    assert np.abs(M + KA).max() <= 1e-10 * (1 + np.abs(KA).max())


def test_piecewise_coefficients_use_cell_indices():
    mesh = build_structured("unit-square", 4)
    ctx = FemContext(mesh, 2)
    left = mesh.centroids[:, 0] < 0.5
    table = np.where(left[:, None, None], np.diag([2.0, 1.0]), np.diag([1.0, 2.0]))
    ctl = Control("pw", CoefficientField.piecewise(table), CoefficientField.constant([0.0, 0.0]),
                  CoefficientField.constant(0.0), CoefficientField.constant(1.0))
    expr = load_problem("discontinuous-A-cordes").control
    a = solve_linear_nondiv(ctx, ctl).solution.coefficients
    b = solve_linear_nondiv(ctx, expr).solution.coefficients
    assert np.allclose(a, b, atol=1e-12)
