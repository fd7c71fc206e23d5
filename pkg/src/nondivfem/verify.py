"""Self-check suite behind ``nondivfem verify``.

Each check returns a record {name, passed, value, tolerance, detail}. The
meshes are small so the whole suite runs in a few seconds.
"""
from __future__ import annotations

import math

import numpy as np

from .assembly import FemContext, constant_A_operator, solve_linear_nondiv
from .coefficients import ControlSet, check_cordes, example1_controls
from .fe_space import FeSpace, project_Ph
from .hjb import solve_hjb
from .lifting import LiftingOperator, lift_partial, lift_partial_equivalent
from .mesh import build_structured
from .problem import load_problem

MATRICES = (np.eye(2), np.diag([1.0, 2.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))


def _record(name, value, tol, detail=""):
    return {"name": name, "passed": bool(value <= tol), "value": float(value), "tolerance": tol, "detail": detail}


def check_lifting_identity(rng, meshes=(2, 4), degrees=(2, 3), pairs=5):
    worst = 0.0
    for n in meshes:
        for r in degrees:
            ctx = FemContext(build_structured("unit-square", n), r)
            for A0 in MATRICES:
                M = constant_A_operator(ctx, A0).matrix
                K = _weighted_stiffness(ctx, A0)
                for _ in range(pairs):
                    w, v = rng.standard_normal((2, ctx.n_dofs))
                    lhs, rhs = v @ (M @ w), v @ (K @ w)
                    worst = max(worst, abs(lhs + rhs) / (1 + abs(lhs) + abs(rhs)))
    return _record("lifting-identity", worst, 1e-10, "int (A0:H(w)) v + (A0 grad w, grad v), relative")


def _weighted_stiffness(ctx, A0):
    cd = ctx.space.cell_data()
    blocks = np.einsum("cq,cqai,ij,cqbj->cba", cd.jxw, cd.dphi, A0, cd.dphi)
    return ctx.space._assemble_local(blocks)


def check_two_forms(rng, meshes=(2, 4), degrees=(2, 3)):
    worst = 0.0
    for n in meshes:
        mesh = build_structured("unit-square", n)
        for r in degrees:
            lift = LiftingOperator(mesh, r)
            V = FeSpace(mesh, r)
            w = V.function(rng.standard_normal(V.n_dofs))
            for axis in (0, 1):
                a = lift_partial(lift, w, axis).coefficients
                b = lift_partial_equivalent(lift, w, axis).coefficients
                worst = max(worst, float(np.abs(a - b).max()))
    return _record("two-form-equivalence", worst, 1e-10, "max coefficient difference")


def check_projection(rng, n=4, fields=10):
    V = FeSpace(build_structured("unit-square", n), 2)
    worst = -math.inf
    for _ in range(fields):
        f = _random_field(rng)

        cd = V.cell_data(2 * V.degree + 2)
        vals = f(cd.points[..., 0], cd.points[..., 1])
        norm_f = math.sqrt(float(np.sum(cd.jxw * vals**2)))
        worst = max(worst, project_Ph(V, f).l2_norm() / norm_f - 1.0)
    return _record("projection-non-expansive", max(worst, 0.0), 1e-12, "||P_h f|| / ||f|| - 1")


def _random_field(rng):
    k = rng.integers(1, 6, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    return lambda x, y: np.sin(k[0] * np.pi * x + ph[0]) * np.cos(k[1] * np.pi * y + ph[1])


def check_scheme_reduction(n=4):
    prob = load_problem("continuous-A-square")
    ctx = FemContext(build_structured("unit-square", n), 2)
    lin = solve_linear_nondiv(ctx, prob.control).solution.coefficients
    hjb = solve_hjb(ctx, ControlSet([prob.control]), 1.0, tol=1e-12).solution.coefficients
    return _record("scheme-reduction", float(np.abs(lin - hjb).max()), 1e-8, "single-control HJB vs linear solve")


def check_cordes_family():
    pts = np.array([[0.25, 0.5]])
    cs0 = example1_controls(1, 0.0, 1.0)
    e0 = check_cordes("fem-general", cs0, 2.0, pts).max_epsilon
    cs = ControlSet([c for c in example1_controls(2, math.pi / 3, 1.0)][1:])
    e1 = check_cordes("fem-general", cs, 8.0 / 7.0, pts).max_epsilon
    err = max(max(0.0, (1 - 1e-9) - e0), abs(e1 - 1.0 / 7.0))
    return _record("cordes-example1", err, 1e-9, f"eps(theta=0)={e0!r}, eps(theta=pi/3)={e1!r}")


def run_suite(seed: int = 42) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [
        check_lifting_identity(rng),
        check_two_forms(rng),
        check_projection(rng),
        check_scheme_reduction(),
        check_cordes_family(),
    ]
