import numpy as np
import pytest
import sympy as sp

from nondivfem.fe_space import FeFunction, FeSpace, interpolate_nodal
from nondivfem.lifting import (
    LiftingOperator,
    discrete_gradient,
    discrete_hessian,
    lift_partial,
    lift_partial_equivalent,
)
from nondivfem.mesh import build_structured

import oracle


def _eval_dg(fun: FeFunction, cell, ref):
    return fun.eval(cell, ref)


def _sample_refs():
    return [(0.2, 0.3), (0.6, 0.1), (1 / 3, 1 / 3), (0.05, 0.9)]


def _phys(space, cell, ref):
    return space.to_physical(np.array([ref]), [cell])[0, 0]


@pytest.fixture(scope="module")
def two_cells():
    return build_structured("unit-square", 1)


@pytest.mark.parametrize("axis", [0, 1])
def test_lift_of_broken_field_matches_exact_oracle(two_cells, axis):
    mesh, r = two_cells, 2
    polys = [1 + 2 * oracle.X - 3 * oracle.Y**2 + oracle.X * oracle.Y, 4 - oracle.X**2 + 5 * oracle.Y]
    exact = oracle.lift_exact(mesh, polys, axis, r)
    dg = FeSpace(mesh, r, "discontinuous")
    xy = dg.dof_coordinates
    vals = np.zeros(dg.n_dofs)
    for k in range(mesh.n_cells):
        f = sp.lambdify((oracle.X, oracle.Y), polys[k])
        d = dg.dof_map[k]
        vals[d] = f(xy[d, 0], xy[d, 1])
    lift = LiftingOperator(mesh, r)
    out = lift_partial(lift, FeFunction(dg, vals), axis)
    for k in range(mesh.n_cells):
        g = sp.lambdify((oracle.X, oracle.Y), exact[k])
        for ref in _sample_refs():
            x, y = _phys(dg, k, ref)
            assert out.eval(k, ref) == pytest.approx(float(g(x, y)), abs=1e-12)


def test_discrete_hessian_matches_exact_oracle(two_cells, rng):
    mesh, r = two_cells, 3
    V = FeSpace(mesh, r)
    coeffs = rng.integers(-3, 4, V.n_dofs).astype(float)
    w = V.function(coeffs)
    local = w.local_coefficients()
    labels = V.element.labels
    polys = [oracle.lagrange_cell_polys(mesh, k, r, labels, [sp.Integer(int(v)) for v in local[k]])
             for k in range(mesh.n_cells)]
    lift = LiftingOperator(mesh, r)
    H = discrete_hessian(lift, w)
    for i, var in enumerate((oracle.X, oracle.Y)):
        grads = [sp.diff(p, var) for p in polys]
        for j in range(2):
            exact = oracle.lift_exact(mesh, grads, j, r)
            comp = FeFunction(lift.target, H.coefficients[i, j])
            for k in range(mesh.n_cells):
                g = sp.lambdify((oracle.X, oracle.Y), exact[k])
                for ref in _sample_refs():
                    x, y = _phys(lift.target, k, ref)
                    assert comp.eval(k, ref) == pytest.approx(float(g(x, y)), abs=1e-11)


@pytest.mark.parametrize("n,r", [(2, 2), (4, 2), (2, 3), (4, 3)])
def test_two_forms_agree(n, r, rng):
    mesh = build_structured("unit-square", n)
    lift = LiftingOperator(mesh, r)
    dg = lift.target
    v = FeFunction(dg, rng.standard_normal(dg.n_dofs))
    for axis in (0, 1):
        a = lift_partial(lift, v, axis).coefficients
        b = lift_partial_equivalent(lift, v, axis).coefficients
        assert np.abs(a - b).max() <= 1e-10


def test_lift_of_constant_is_zero():
    mesh = build_structured("unit-square", 3)
    lift = LiftingOperator(mesh, 2)
    one = FeFunction(lift.target, np.ones(lift.target.n_dofs))
    for axis in (0, 1):
        assert np.abs(lift_partial(lift, one, axis).coefficients).max() < 1e-12
        assert np.abs(lift_partial_equivalent(lift, one, axis).coefficients).max() < 1e-12


def test_lift_of_continuous_function_is_its_derivative(rng):
    # w in V_h vanishes on the boundary and has no interior jumps
    mesh = build_structured("unit-square", 3)
    lift = LiftingOperator(mesh, 2)
    V = FeSpace(mesh, 2)
    w = V.function(rng.standard_normal(V.n_dofs))
    grad = discrete_gradient(lift, w)
    for k in range(mesh.n_cells):
        for ref in _sample_refs():
            _, g = w.eval(k, ref, gradient=True)
            assert grad.eval(k, ref) == pytest.approx(g, abs=1e-12)


def test_lift_is_linear(rng):
    mesh = build_structured("unit-square", 2)
    lift = LiftingOperator(mesh, 2)
    dg = lift.target
    a, b = rng.standard_normal((2, dg.n_dofs))
    la = lift_partial(lift, FeFunction(dg, a), 0).coefficients
    lb = lift_partial(lift, FeFunction(dg, b), 0).coefficients
    lab = lift_partial(lift, FeFunction(dg, 2 * a - 3 * b), 0).coefficients
    assert np.allclose(lab, 2 * la - 3 * lb, atol=1e-12)


def test_hessian_maps_match_extended_precision_application(rng):
    mesh = build_structured("unit-square", 4)
    lift = LiftingOperator(mesh, 3)
    V = FeSpace(mesh, 3)
    u = rng.standard_normal(V.n_dofs)
    maps = lift.hessian_maps(V)
    ld = lift.apply_hessian(V, u)
    for i in range(2):
        for j in range(2):
            assert np.allclose(maps[i][j] @ u, ld[i, j], rtol=1e-12, atol=1e-10)


def test_mixed_hessian_entries_have_equal_means():
    mesh = build_structured("unit-square", 4)
    lift = LiftingOperator(mesh, 2)
    w = interpolate_nodal(FeSpace(mesh, 2), lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    H = discrete_hessian(lift, w)
    cd = lift.target.cell_data()
    vals = np.einsum("ijca,qa->ijcq", H.local_coefficients(), cd.phi)
    means = np.einsum("cq,ijcq->ij", cd.jxw, vals)
    assert means[0, 1] == pytest.approx(means[1, 0], abs=1e-12)


def test_errors():
    mesh = build_structured("unit-square", 2)
    other = build_structured("unit-square", 2)
    lift = LiftingOperator(mesh, 2)
    with pytest.raises(ValueError):
        lift.matrix(2)
    with pytest.raises(ValueError):
        lift.matrix(0, form="bogus")
    with pytest.raises(ValueError):
        lift_partial(lift, FeSpace(other, 2, "discontinuous").function(), 0)
    with pytest.raises(TypeError):
        discrete_hessian(lift, FeSpace(mesh, 2, "discontinuous").function())


def test_dump_writes_coordinate_lines(tmp_path):
    mesh = build_structured("unit-square", 1)
    lift = LiftingOperator(mesh, 2)
    V = FeSpace(mesh, 2)
    lift.dump(tmp_path / "h.txt", V)
    lines = (tmp_path / "h.txt").read_text().splitlines()
    assert lines and all(l.split()[0] in ("H00", "H01", "H10", "H11") for l in lines)
