import json
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

import oracle
from nondivfem.fe_space import FeSpace, interpolate_nodal, project_Ph
from nondivfem.mesh import build_structured, refine_uniform
from nondivfem.norms import (
    ExactSolution,
    convergence_table,
    error_report,
    estimate_order,
    face_jump_weights,
    lp_norms,
    lph_dual_norm_p2,
    table_csv,
    table_json,
    w2ph_norm,
    w2ph_terms,
)


def _sympy_w2_terms(mesh, polys):
    vol = 0
    for k, p in enumerate(polys):
        verts = oracle.cell_vertices(mesh, k)
        hess = [sp.diff(p, a, b) for a in (oracle.X, oracle.Y) for b in (oracle.X, oracle.Y)]
        vol += oracle.integrate_cell(sum(h**2 for h in hess), verts)
    jump = 0
    for key, owners in oracle.edges(mesh).items():
        if len(owners) != 2:
            continue
        (k1, i, j), (k2, _, _) = owners
        verts = oracle.cell_vertices(mesh, k1)
        a, b = verts[i], verts[j]
        h = sp.sqrt((b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2)
        d = [sp.diff(polys[k1] - polys[k2], v) for v in (oracle.X, oracle.Y)]
        jump += oracle.integrate_edge(d[0] ** 2 + d[1] ** 2, a, b) / h
    return math.sqrt(float(vol)), math.sqrt(float(jump))


def test_two_cell_dense_oracle(rng):
    mesh = build_structured("unit-square", 1)
    D = FeSpace(mesh, 2, "discontinuous")
    coeffs = rng.integers(-4, 5, D.n_dofs).astype(float)
    v = D.function(coeffs)
    local = v.local_coefficients()
    polys = [oracle.lagrange_cell_polys(mesh, k, 2, D.element.labels, [sp.Integer(int(c)) for c in local[k]])
             for k in range(2)]
    vol, jmp = w2ph_terms(v, 2.0)
    evol, ejmp = _sympy_w2_terms(mesh, polys)
    assert vol == pytest.approx(evol, rel=1e-12)
    assert jmp == pytest.approx(ejmp, rel=1e-12)


def test_linear_function_has_zero_norm():
    D = FeSpace(build_structured("unit-square", 3), 2, "discontinuous")
    v = interpolate_nodal(D, lambda x, y: 2 * x - 3 * y + 1)
    assert w2ph_norm(v) < 1e-10


def test_c1_function_has_no_jump_term():
    V = FeSpace(build_structured("unit-square", 2), 4)
    v = interpolate_nodal(V, lambda x, y: x * (1 - x) * y * (1 - y))
    vol, jmp = w2ph_terms(v, 2.0)
    assert jmp < 1e-12
    assert vol == pytest.approx(math.sqrt(float(
        sp.integrate(sum(sp.diff(oracle.X * (1 - oracle.X) * oracle.Y * (1 - oracle.Y), a, b) ** 2
                         for a in (oracle.X, oracle.Y) for b in (oracle.X, oracle.Y)),
                     (oracle.X, 0, 1), (oracle.Y, 0, 1)))), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5), st.sampled_from([1.5, 2.0, 3.0]))
def test_seminorm_properties(seed, t, p):
    rng = np.random.default_rng(seed)
    V = FeSpace(build_structured("unit-square", 2), 2)
    u, v = (V.function(c) for c in rng.standard_normal((2, V.n_dofs)))
    nu, nv = w2ph_norm(u, p), w2ph_norm(v, p)
    assert w2ph_norm(V.function(u.coefficients + v.coefficients), p) <= nu + nv + 1e-10
    assert w2ph_norm(V.function(t * u.coefficients), p) == pytest.approx(abs(t) * nu, rel=1e-12, abs=1e-12)


def test_jump_weights_follow_refinement():
    m = build_structured("unit-square", 2)
    for p in (1.5, 2.0, 4.0):
        w0 = face_jump_weights(m, p)
        w1 = face_jump_weights(refine_uniform(m), p)
        assert np.allclose(np.sort(w1)[[0, -1]], np.sort(w0)[[0, -1]] * 2 ** (p - 1))
        assert np.allclose(w0, m.face_lengths[: m.n_interior_faces] ** (1 - p))


def test_jump_term_scales_with_mesh_for_kink():
    # |x - 0.5| interpolated on meshes aligned with x = 0.5: gradient jump 2 along
    # a vertical line of length 1, so jump^2 = sum_F h_F^{-1} * 4 * h_F = 4 * (#faces)
    for n in (2, 4, 8):
        D = FeSpace(build_structured("unit-square", n), 2, "discontinuous")
        v = interpolate_nodal(D, lambda x, y: np.abs(x - 0.5))
        _, jmp = w2ph_terms(v, 2.0)
        assert jmp == pytest.approx(math.sqrt(4 * n), rel=1e-12)


def test_invalid_exponent():
    V = FeSpace(build_structured("unit-square", 2), 2)
    for p in (1.0, 0.5, math.inf):
        with pytest.raises(ValueError):
            w2ph_norm(V.function(), p)


def test_dual_norm(rng):
    V = FeSpace(build_structured("unit-square", 4), 2)
    w = V.function(rng.standard_normal(V.n_dofs))
    assert lph_dual_norm_p2(V, w) == pytest.approx(w.l2_norm())
    coarse = FeSpace(build_structured("unit-square", 2), 2)
    osc = lambda x, y: np.sin(16 * np.pi * x) * np.sin(16 * np.pi * y)  # noqa: E731
    assert lph_dual_norm_p2(coarse, osc) < 0.5 * 0.5
    f = lambda x, y: np.exp(x) * np.cos(3 * y) + x * y  # noqa: E731
    dual = lph_dual_norm_p2(V, f)
    cd = V.cell_data(6)
    load = V.load_vector(f(cd.points[..., 0], cd.points[..., 1]), 6)
    best = 0.0
    for _ in range(200):
        c = rng.standard_normal(V.n_dofs)
        best = max(best, (c @ load) / math.sqrt(c @ (V.mass_matrix @ c)))
    assert dual >= best - 1e-10
    assert project_Ph(V, f).l2_norm() == dual
    with pytest.raises(NotImplementedError):
        lph_dual_norm_p2(V, f, p=3)


def test_estimate_order_examples():
    assert estimate_order([1, 0.25], [1, 0.5]) == [pytest.approx(2.0)]
    assert estimate_order([0.3, 0.3, 0.3], [1, 0.5, 0.25]) == [0.0, 0.0]
    assert estimate_order([1, 0, 1], [1, 0.5, 0.25]) == [None, None]
    with pytest.raises(ValueError):
        estimate_order([1], [1])
    with pytest.raises(ValueError):
        estimate_order([1, 2], [1])


def test_interpolation_error_order():
    # nodal interpolant of the bubble at r = 2 converges at O(h^3) in L2
    exact = ExactSolution.from_expression("x*(1-x)*y*(1-y)")
    errs, hs = [], []
    for n in (4, 8, 16):
        V = FeSpace(build_structured("unit-square", n), 2)
        errs.append(lp_norms(interpolate_nodal(V, exact.u), 2.0, exact)[0])
        hs.append(V.mesh.h_max)
    assert estimate_order(errs, hs)[-1] == pytest.approx(3.0, abs=0.1)


def test_error_report_table_and_exports(tmp_path):
    exact = ExactSolution.from_expression("sin(pi*x)*sin(pi*y)")
    reps = []
    for lvl, n in enumerate((4, 8, 16)):
        V = FeSpace(build_structured("unit-square", n), 2)
        reps.append(error_report(V, interpolate_nodal(V, exact.u), exact, 2.0, lvl, proxies=True))
    for r in reps:
        d = r.to_dict()
        assert all(v >= 0 for k, v in d.items() if isinstance(v, float))
        assert r.w2ph == pytest.approx(r.w2ph_volume + r.w2ph_jump)
        assert r.interp_w2ph == pytest.approx(r.w2ph)
    rows = convergence_table(reps)
    assert rows[0]["eoc_w2ph"] is None
    assert 0.9 <= rows[-1]["eoc_w2ph"] <= 1.3
    csv_text = table_csv(rows)
    header = csv_text.splitlines()[0].split(",")
    assert header[:3] == ["level", "h", "n_dofs"] and "eoc_w2ph" in header
    assert float(csv_text.splitlines()[2].split(",")[1]) == rows[1]["h"]
    assert json.loads(table_json(rows))[2]["level"] == 2
