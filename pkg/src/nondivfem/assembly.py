"""Assembly and solution of the gamma-weighted non-divergence scheme.

Every operator is built from quadrature-point matrices: T (V_h values),
G_k (V_h gradients) and EH_ij (discrete Hessian of V_h functions evaluated
at the same points). With W the quadrature weights, the scheme matrix is

    M = T^T W diag(gamma) [sum_ij diag(a_ij) EH_ij + sum_k diag(b_k) G_k + diag(c) T]
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import bicgstab, splu

from .coefficients import Control, ControlSet, ControlValues, gamma, validate_values
from .fe_space import FeFunction, FeSpace
from .lifting import LiftingOperator
from .mesh import Mesh

DIRECT_LIMIT = 100_000  # larger systems go to the Krylov fallback


class SingularSystemError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FemContext:
    """Spaces, lifting maps and quadrature matrices for one mesh and degree."""

    def __init__(self, mesh: Mesh, degree: int = 2, quad_degree: int | None = None, form: str = "average"):
        if degree < 2:
            raise ValueError("the discrete Hessian scheme needs degree r >= 2")
        self.mesh = mesh
        self.degree = degree
        # coefficient data is integrated as a polynomial of degree 2r + 2
        self.quad_degree = max(2 * degree, 2 * degree - 2 + (2 * degree + 2)) if quad_degree is None else quad_degree
        self.form = form
        self.space = FeSpace(mesh, degree, "continuous")
        self.lifting = LiftingOperator(mesh, degree)

    @property
    def n_dofs(self) -> int:
        return self.space.n_dofs

    @cached_property
    def cell_data(self):
        return self.space.cell_data(self.quad_degree)

    @cached_property
    def points(self) -> np.ndarray:
        """(Q, 2) quadrature points, cell-major."""
        return self.cell_data.points.reshape(-1, 2)

    @cached_property
    def cells(self) -> np.ndarray:
        cd = self.cell_data
        return np.repeat(np.arange(self.mesh.n_cells), cd.points.shape[1])

    @cached_property
    def weights(self) -> np.ndarray:
        return self.cell_data.jxw.ravel()

    @cached_property
    def T(self) -> sp.csr_matrix:
        return self.space.eval_matrix(self.quad_degree)

    @cached_property
    def TW(self) -> sp.csr_matrix:
        """T^T W: quadrature values -> load vector."""
        return (self.T.T @ sp.diags(self.weights)).tocsr()

    @cached_property
    def G(self) -> tuple:
        return self.space.grad_matrices(self.quad_degree)

    @cached_property
    def EH(self) -> list:
        """EH[i][j]: V_h coefficients -> H_ij(u) at quadrature points."""
        E = self.lifting.target.eval_matrix(self.quad_degree)
        H = self.lifting.hessian_maps(self.space, self.form)
        return [[(E @ H[i][j]).tocsr() for j in range(2)] for i in range(2)]

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return self.space.mass_matrix

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return self.space.stiffness_matrix

    def function(self, coefficients=None) -> FeFunction:
        return self.space.function(coefficients)

    def evaluate_controls(self, controls: ControlSet, validate: bool = True) -> ControlValues:
        x, y = self.points[:, 0], self.points[:, 1]
        vals = controls.evaluate(x, y, self.cells)
        if validate:
            validate_values(vals, x, y, controls.labels)
        return vals

    def hessian_at_points(self, coefficients) -> np.ndarray:
        """(2, 2, Q) discrete Hessian values."""
        return np.stack([np.stack([self.EH[i][j] @ coefficients for j in range(2)]) for i in range(2)])

    def load(self, values) -> np.ndarray:
        return self.TW @ np.asarray(values, dtype=float)


@dataclass(frozen=True, eq=False)
class AssembledOperator:
    matrix: sp.csr_matrix
    tag: str  # nondiv | constant-A | shifted-laplacian
    snapshot: dict = field(default_factory=dict)
    rhs: np.ndarray | None = None

    @property
    def shape(self):
        return self.matrix.shape


def weighted_operator(ctx: FemContext, A, b, c, weight) -> sp.csr_matrix:
    """T^T W diag(weight) (A : EH + b . G + c T) for per-point arrays
    A (Q, 2, 2), b (Q, 2), c (Q,), weight (Q,)."""
    inner = sp.csr_matrix((ctx.weights.size, ctx.n_dofs))
    for i in range(2):
        for j in range(2):
            inner = inner + sp.diags(weight * A[:, i, j]) @ ctx.EH[i][j]
    for k in range(2):
        if np.any(b[:, k]):
            inner = inner + sp.diags(weight * b[:, k]) @ ctx.G[k]
    if np.any(c):
        inner = inner + sp.diags(weight * c) @ ctx.T
    return (ctx.TW @ inner).tocsr()


def assemble_nondiv(ctx: FemContext, control: Control, validate: bool = True):
    """Scheme matrix and load vector for a single control."""
    vals = ctx.evaluate_controls(ControlSet([control]), validate)
    A, b, c, f = vals.A[0], vals.b[0], vals.c[0], vals.f[0]
    g = gamma(A, ctx.points)
    op = AssembledOperator(
        weighted_operator(ctx, A, b, c, g),
        "nondiv",
        {"control": control.label, "degree": ctx.degree, "quad_degree": ctx.quad_degree},
        ctx.load(g * f),
    )
    return op, op.rhs


def sparse_solve(matrix: sp.spmatrix, rhs: np.ndarray, direct_limit: int = DIRECT_LIMIT):
    """Direct LU for desk-size systems, BiCGSTAB beyond. Returns (x, method)."""
    n = matrix.shape[0]
    if n == 0:
        return np.zeros(0), "empty"
    if n <= direct_limit:
        try:
            lu = splu(sp.csc_matrix(matrix))
        except RuntimeError as exc:
            raise SingularSystemError(f"sparse factorization failed: {exc}", _diagnostics(matrix)) from exc
        x = lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("factorization produced non-finite values", _diagnostics(matrix))
        return x, "splu"
    x, info = bicgstab(matrix, rhs, rtol=1e-12, maxiter=20 * n)
    if info != 0:
        raise SingularSystemError(f"BiCGSTAB did not converge (info={info})", _diagnostics(matrix))
    return x, "bicgstab"


def _diagnostics(matrix) -> dict:
    m = sp.csr_matrix(matrix)
    rows = np.abs(m).sum(axis=1).A1
    diag = m.diagonal()
    return {
        "n": int(m.shape[0]),
        "zero_rows": int((rows == 0).sum()),
        "min_abs_diagonal": float(np.abs(diag).min()) if diag.size else 0.0,
        "max_abs_diagonal": float(np.abs(diag).max()) if diag.size else 0.0,
        "hint": "check ellipticity and the Cordes condition of the coefficients",
    }


@dataclass
class SolveReport:
    solution: FeFunction
    residual_inf: float
    rhs_inf: float
    method: str
    timings: dict
    mesh: dict
    errors: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def residual_ok(self) -> bool:
        return self.residual_inf <= 1e-9 * max(self.rhs_inf, np.finfo(float).tiny)

    def to_dict(self) -> dict:
        return {
            "residual_inf": self.residual_inf,
            "rhs_inf": self.rhs_inf,
            "residual_ok": self.residual_ok,
            "method": self.method,
            "n_dofs": self.solution.space.n_dofs,
            "degree": self.solution.space.degree,
            "mesh": self.mesh,
            "errors": self.errors,
            **self.extra,
        }


def solve_linear_nondiv(ctx: FemContext, control: Control, exact=None, p: float = 2.0) -> SolveReport:
    t0 = time.perf_counter()
    op, F = assemble_nondiv(ctx, control)
    t1 = time.perf_counter()
    u, method = sparse_solve(op.matrix, F)
    t2 = time.perf_counter()
    res = float(np.abs(op.matrix @ u - F).max()) if len(F) else 0.0
    uh = ctx.function(u)
    errors = None
    if exact is not None:
        from .norms import error_report

        errors = error_report(ctx, uh, exact, p).to_dict()
    return SolveReport(
        uh,
        res,
        float(np.abs(F).max()) if len(F) else 0.0,
        method,
        {"assemble_s": t1 - t0, "solve_s": t2 - t1},
        ctx.mesh.stats(),
        errors,
    )


def assemble_shifted_laplacian(ctx: FemContext, lam: float) -> AssembledOperator:
    """Matrix of -(grad w, grad v) - lam (w, v); exactly symmetric."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    m = -ctx.stiffness - lam * ctx.mass
    m = (0.5 * (m + m.T)).tocsr()
    return AssembledOperator(m, "shifted-laplacian", {"lambda": float(lam)})


class ShiftedLaplacianSolver:
    """Factorized M_{lambda,h}: g -> M with -(grad M, grad v) - lam (M, v) = (g, v)."""

    def __init__(self, ctx: FemContext, lam: float):
        self.ctx = ctx
        self.lam = float(lam)
        self.operator = assemble_shifted_laplacian(ctx, lam)
        # factorize the positive definite negation
        self._lu = splu(sp.csc_matrix(-self.operator.matrix))

    def solve_functional(self, load: np.ndarray) -> np.ndarray:
        """Solution for a right-hand side given as the vector (g, phi_i)."""
        return -self._lu.solve(load)

    def solve_positive(self, load: np.ndarray) -> np.ndarray:
        """w with (grad w, grad v) + lam (w, v) = load."""
        return self._lu.solve(load)


def apply_M_lambda(ctx: FemContext, lam: float, g) -> FeFunction:
    """M_{lambda,h}(g) for g in V_h (FeFunction or coefficient vector)."""
    coeffs = g.coefficients if isinstance(g, FeFunction) else np.asarray(g, dtype=float)
    solver = ShiftedLaplacianSolver(ctx, lam)
    return ctx.function(solver.solve_functional(ctx.mass @ coeffs))


def constant_A_operator(ctx: FemContext, A0) -> AssembledOperator:
    """Matrix of (w, v) -> int (A0 : H(w)) v."""
    A0 = np.asarray(A0, dtype=float)
    Q = ctx.weights.size
    m = weighted_operator(ctx, np.broadcast_to(A0, (Q, 2, 2)), np.zeros((Q, 2)), np.zeros(Q), np.ones(Q))
    return AssembledOperator(m, "constant-A", {"A0": A0.tolist()})


def apply_L_constant(ctx: FemContext, A0, w) -> FeFunction:
    """V_h Riesz representer of v -> int (A0 : H(w)) v."""
    A0 = np.asarray(A0, dtype=float)
    coeffs = w.coefficients if isinstance(w, FeFunction) else np.asarray(w, dtype=float)
    H = ctx.hessian_at_points(coeffs)
    vals = np.einsum("ij,ijq->q", A0, H)
    return ctx.function(ctx.space.solve_mass(ctx.load(vals)))


def discrete_laplacian(ctx: FemContext, w) -> FeFunction:
    return apply_L_constant(ctx, np.eye(2), w)


def export_matrix(op: AssembledOperator | sp.spmatrix, path) -> None:
    """Coordinate text: header 'n_rows n_cols nnz', then 'row col value'."""
    m = (op.matrix if isinstance(op, AssembledOperator) else op).tocoo()
    order = np.lexsort((m.col, m.row))
    lines = [f"{m.shape[0]} {m.shape[1]} {m.nnz}"]
    lines += [f"{r} {c} {v:.17g}" for r, c, v in zip(m.row[order], m.col[order], m.data[order])]
    Path(path).write_text("\n".join(lines) + "\n")


def stability_ratio(ctx: FemContext, control: Control, coefficients, op: AssembledOperator | None = None) -> float:
    """||w||_{W^{2,2}_h} / ||P_h(gamma (A:H + b.grad + c) w)||_{L^2}."""
    from .norms import w2ph_norm

    if op is None:
        op, _ = assemble_nondiv(ctx, control)
    z = ctx.space.solve_mass(op.matrix @ coefficients)
    denom = math.sqrt(max(float(z @ (ctx.mass @ z)), 0.0))
    return w2ph_norm(ctx.function(coefficients), 2.0) / denom


def report_json(report: SolveReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
