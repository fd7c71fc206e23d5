"""Discrete HJB equation: contraction fixed point and policy iteration.

The discrete problem is (g(u_h), v_h) = 0 for all v_h in V_h where, at each
quadrature point,

    g(u) = max_alpha gamma^alpha [A^alpha : H(u) + b^alpha . grad u + c^alpha u - f^alpha].

One fixed-point step solves

    (grad u+, grad v) + lam (u+, v) = (g(u), v) - (I : H(u), v) + lam (u, v).
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import FemContext, ShiftedLaplacianSolver, SingularSystemError, sparse_solve, weighted_operator
from .coefficients import ControlSet, gamma_alpha
from .fe_space import FeFunction
from .norms import ExactSolution, error_report, ph_l2_from_load, w2ph_norm


@dataclass
class WeightedControls:
    """gamma^alpha-weighted coefficients at the quadrature points of a context."""

    A: np.ndarray  # (m, Q, 2, 2)
    b: np.ndarray  # (m, Q, 2)
    c: np.ndarray  # (m, Q)
    f: np.ndarray  # (m, Q)
    labels: list

    @classmethod
    def build(cls, ctx: FemContext, controls: ControlSet, validate: bool = True) -> "WeightedControls":
        vals = ctx.evaluate_controls(controls, validate)
        g = gamma_alpha(vals.A)
        return cls(g[..., None, None] * vals.A, g[..., None] * vals.b, g * vals.c, g * vals.f, controls.labels)


@dataclass
class HjbState:
    coefficients: np.ndarray
    iteration: int = 0
    increments_h1: list = field(default_factory=list)
    increments_w2: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    lam: float = 1.0
    argmax: np.ndarray | None = None
    residual: float = math.nan  # ||P_h g(u)||_{L^2} at the current iterate


class HjbSolver:
    """Holds the factorized shifted Laplacian and the weighted control data."""

    def __init__(self, ctx: FemContext, controls: ControlSet, lam: float, validate: bool = True):
        if len(controls) == 0:
            raise ValueError("control set is empty")
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam!r}")
        self.ctx = ctx
        self.controls = controls
        self.lam = float(lam)
        self.data = WeightedControls.build(ctx, controls, validate)
        self.shifted = ShiftedLaplacianSolver(ctx, lam)
        self._trace_H = (ctx.EH[0][0] + ctx.EH[1][1]).tocsr()

    # -- residual ------------------------------------------------------------
    def pointwise(self, u: np.ndarray) -> np.ndarray:
        """(m, Q) weighted residual of every control."""
        ctx, d = self.ctx, self.data
        H = ctx.hessian_at_points(u)
        grad = np.stack([ctx.G[0] @ u, ctx.G[1] @ u])
        val = ctx.T @ u
        return (
            np.einsum("mqij,ijq->mq", d.A, H)
            + np.einsum("mqk,kq->mq", d.b, grad)
            + d.c * val[None, :]
            - d.f
        )

    def sup_residual(self, u: np.ndarray):
        """(g at quadrature points, argmax control index); ties go to the smallest index."""
        R = self.pointwise(u)
        arg = np.argmax(R, axis=0)
        return R[arg, np.arange(R.shape[1])], arg

    def residual_norm(self, g: np.ndarray) -> float:
        return ph_l2_from_load(self.ctx.space, self.ctx.load(g))

    def histogram(self, arg: np.ndarray) -> list[int]:
        return np.bincount(arg, minlength=len(self.controls)).tolist()

    # -- iterations ----------------------------------------------------------
    def initial_state(self, u0=None) -> HjbState:
        u = np.zeros(self.ctx.n_dofs) if u0 is None else np.asarray(u0, dtype=float).copy()
        g, arg = self.sup_residual(u)
        st = HjbState(u, lam=self.lam, argmax=arg, residual=self.residual_norm(g))
        st.residuals.append(st.residual)
        st.histograms.append(self.histogram(arg))
        return st

    def _increment_norms(self, delta: np.ndarray):
        ctx, lam = self.ctx, self.lam
        k = float(delta @ (ctx.stiffness @ delta))
        m = float(delta @ (ctx.mass @ delta))
        h1 = math.sqrt(max(k + lam * m, 0.0))
        w2 = w2ph_norm(ctx.function(delta), 2.0)
        return h1, math.sqrt(w2**2 + 2 * lam * k + lam**2 * m)

    def _record(self, state: HjbState, new: np.ndarray) -> HjbState:
        h1, w2 = self._increment_norms(new - state.coefficients)
        g, arg = self.sup_residual(new)
        state.coefficients = new
        state.iteration += 1
        state.increments_h1.append(h1)
        state.increments_w2.append(w2)
        state.argmax = arg
        state.residual = self.residual_norm(g)
        state.residuals.append(state.residual)
        state.histograms.append(self.histogram(arg))
        return state

    def fixed_point_step(self, state: HjbState) -> HjbState:
        ctx, u = self.ctx, state.coefficients
        g, _ = self.sup_residual(u)
        rhs = ctx.load(g) - ctx.load(self._trace_H @ u) + self.lam * (ctx.mass @ u)
        return self._record(state, self.shifted.solve_positive(rhs))

    def frozen_system(self, arg: np.ndarray):
        """Linear system with the control frozen at every quadrature point."""
        d, q = self.data, np.arange(len(arg))
        m = weighted_operator(self.ctx, d.A[arg, q], d.b[arg, q], d.c[arg, q], np.ones(len(arg)))
        return m, self.ctx.load(d.f[arg, q])

    def policy_iteration_step(self, state: HjbState) -> HjbState:
        _, arg = self.sup_residual(state.coefficients)
        m, F = self.frozen_system(arg)
        try:
            new, _ = sparse_solve(m, F)
        except SingularSystemError:
            return self.fixed_point_step(state)
        return self._record(state, new)


@dataclass
class HjbReport:
    solution: FeFunction
    state: HjbState
    converged: bool
    status: str  # converged | diverged-or-slow
    method: str
    lam: float
    tol: float
    last_ratio: float | None
    controls: list
    timings: dict
    errors: dict | None = None

    def to_dict(self) -> dict:
        st = self.state
        return {
            "status": self.status,
            "converged": self.converged,
            "method": self.method,
            "lambda": self.lam,
            "tol": self.tol,
            "iterations": st.iteration,
            "final_residual": st.residual,
            "initial_residual": st.residuals[0] if st.residuals else None,
            "last_increment_h1": st.increments_h1[-1] if st.increments_h1 else None,
            "last_contraction_ratio": self.last_ratio,
            "active_control_histogram": dict(zip(self.controls, st.histograms[-1])) if st.histograms else {},
            "n_dofs": self.solution.space.n_dofs,
            "errors": self.errors,
        }


def _ratio(hist: list) -> float | None:
    if len(hist) >= 2 and hist[-2] > 0:
        return hist[-1] / hist[-2]
    return None


def solve_hjb(ctx: FemContext, controls: ControlSet, lam: float, tol: float = 1e-8, max_iter: int = 500,
              method: str = "fixed-point", exact: ExactSolution | None = None, u0=None,
              solver: HjbSolver | None = None) -> HjbReport:
    """Iterate from u0 = 0 until the lambda-weighted H1 increment drops below tol.

    method "policy" uses policy iteration steps (falling back to a contraction
    step if a frozen system is singular) and stops when the active control
    field is unchanged or the increment is below tol.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method not in ("fixed-point", "policy"):
        raise ValueError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    solver = HjbSolver(ctx, controls, lam) if solver is None else solver
    state = solver.initial_state(u0)
    step = solver.fixed_point_step if method == "fixed-point" else solver.policy_iteration_step
    converged = False
    while state.iteration < max_iter:
        prev_arg = state.argmax
        step(state)
        if state.increments_h1[-1] <= tol:
            converged = True
            break
        if method == "policy" and np.array_equal(prev_arg, state.argmax):
            converged = True
            break
    t1 = time.perf_counter()
    uh = ctx.function(state.coefficients)
    errors = error_report(ctx, uh, exact).to_dict() if exact is not None else None
    return HjbReport(
        uh,
        state,
        converged,
        "converged" if converged else "diverged-or-slow",
        method,
        solver.lam,
        tol,
        _ratio(state.increments_h1),
        controls.labels,
        {"solve_s": t1 - t0},
        errors,
    )


def iteration_log_csv(state: HjbState, labels: list) -> str:
    """k, increment_h1_lambda, increment_w22h_lambda, residual, histogram columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "increment_h1_lambda", "increment_w22h_lambda", "residual"] + [f"active_{l}" for l in labels])
    for k in range(len(state.residuals)):
        inc1 = f"{state.increments_h1[k - 1]:.17g}" if k > 0 else ""
        inc2 = f"{state.increments_w2[k - 1]:.17g}" if k > 0 else ""
        w.writerow([k, inc1, inc2, f"{state.residuals[k]:.17g}"] + list(state.histograms[k]))
    return buf.getvalue()


def cell_majority_control(ctx: FemContext, argmax: np.ndarray, n_controls: int) -> np.ndarray:
    """Most frequent active control per cell (smallest index on ties)."""
    per_cell = argmax.reshape(ctx.mesh.n_cells, -1)
    counts = np.stack([(per_cell == a).sum(axis=1) for a in range(n_controls)], axis=1)
    return np.argmax(counts, axis=1)
