"""Broken Sobolev norms, error reports and convergence tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .expressions import Node, gradient, hessian, parse
from .fe_space import FeFunction, FeSpace, interpolate_nodal, project_Pbar, project_Ph
from .quadrature import triangle_rule


@dataclass(frozen=True)
class ExactSolution:
    """A smooth reference u with analytic gradient and Hessian.

    Callables take (x, y) arrays; grad returns (2, *shape), hess (2, 2, *shape).
    """

    u: Callable
    grad: Callable
    hess: Callable
    source: str = ""

    @classmethod
    def from_expression(cls, text: str | Node) -> "ExactSolution":
        node = parse(text) if isinstance(text, str) else text
        g = gradient(node)
        h = hessian(node)
        return cls(
            node,
            lambda x, y: np.stack([g[0](x, y), g[1](x, y)]),
            lambda x, y: np.stack([np.stack([h[i][j](x, y) for j in range(2)]) for i in range(2)]),
            str(text),
        )


def _check_p(p: float):
    if not p > 1 or not math.isfinite(p):
        raise ValueError(f"exponent p must lie in (1, inf), got {p!r}")


def _default_degree(space: FeSpace) -> int:
    return 2 * space.degree + 4


def w2ph_terms(v: FeFunction, p: float = 2.0, exact: ExactSolution | None = None,
               degree: int | None = None) -> tuple[float, float]:
    """Volume and jump parts of the W^{2,p}_h norm of v (or of exact - v).

    volume = (sum_K ||D^2 v||^p_{L^p(K)})^{1/p}
    jump   = (sum_{interior F} h_F^{1-p} ||[grad v]||^p_{L^p(F)})^{1/p}

    The exact solution is assumed C^1, so it does not contribute to jumps.
    """
    _check_p(p)
    space = v.space
    degree = _default_degree(space) if degree is None else degree
    local = v.local_coefficients()
    cd = space.cell_data(degree)
    hb = space.cell_hessians(triangle_rule(degree).points)  # (nc, nq, nloc, 2, 2)
    H = np.einsum("ca,cqaij->cqij", local, hb)
    if exact is not None:
        H = np.moveaxis(exact.hess(cd.points[..., 0], cd.points[..., 1]), (0, 1), (-2, -1)) - H
    frob = np.sqrt(np.einsum("cqij,cqij->cq", H, H))
    volume = float(np.sum(cd.jxw * frob**p)) ** (1.0 / p)

    mesh = space.mesh
    nI = mesh.n_interior_faces
    if nI == 0:
        return volume, 0.0
    fd = space.face_data(degree)
    I = np.arange(nI)
    cells = mesh.face_cells[I]
    gp = np.einsum("fa,ftai->fti", local[cells[:, 0]], fd.dphi[0, I])
    gm = np.einsum("fa,ftai->fti", local[cells[:, 1]], fd.dphi[1, I])
    jump = np.linalg.norm(gp - gm, axis=-1)
    hF = mesh.face_lengths[I]
    jump_term = float(np.sum(hF ** (1 - p) * np.sum(fd.jxw[I] * jump**p, axis=1))) ** (1.0 / p)
    return volume, jump_term


def w2ph_norm(v: FeFunction, p: float = 2.0, exact: ExactSolution | None = None, degree: int | None = None) -> float:
    vol, jmp = w2ph_terms(v, p, exact, degree)
    return vol + jmp


def lp_norms(v: FeFunction, p: float = 2.0, exact: ExactSolution | None = None, degree: int | None = None):
    """(||e||_{L^p}, |e|_{W^{1,p}}) with e = v or e = exact - v."""
    _check_p(p)
    space = v.space
    degree = _default_degree(space) if degree is None else degree
    cd = space.cell_data(degree)
    val = v.at_quadrature(degree)
    grad = v.gradient_at_quadrature(degree)
    if exact is not None:
        x, y = cd.points[..., 0], cd.points[..., 1]
        val = exact.u(x, y) - val
        grad = np.moveaxis(exact.grad(x, y), 0, -1) - grad
    l = float(np.sum(cd.jxw * np.abs(val) ** p)) ** (1 / p)
    g = float(np.sum(cd.jxw * np.linalg.norm(grad, axis=-1) ** p)) ** (1 / p)
    return l, g


def weighted_w2ph_norm(v: FeFunction, lam: float, p: float = 2.0) -> float:
    """(||v||^p_{W^{2,p}_h} + 2 lam ||grad v||^p + lam^2 ||v||^p)^{1/p}"""
    l, g = lp_norms(v, p)
    return (w2ph_norm(v, p) ** p + 2 * lam * g**p + lam**2 * l**p) ** (1 / p)


def lph_dual_norm_p2(space: FeSpace, w, p: float = 2.0, degree: int | None = None) -> float:
    """Discrete dual L^2_h norm, realized as ||P_h w||_{L^2}.

    Only p = 2 is supported: other exponents need a nonlinear dual-norm
    optimization that this package does not implement.
    """
    if p != 2:
        raise NotImplementedError(
            f"the discrete dual norm is available only for p = 2 (got p = {p!r}); "
            "it is realized as the L2 norm of the projection onto V_h"
        )
    if isinstance(w, FeFunction) and w.space is space:
        return w.l2_norm()
    return project_Ph(space, w, degree).l2_norm()


def ph_l2_from_load(space: FeSpace, load: np.ndarray) -> float:
    """||P_h g||_{L^2} from the load vector (g, phi_i)."""
    z = space.solve_mass(load)
    return math.sqrt(max(float(z @ (space.mass_matrix @ z)), 0.0))


def estimate_order(values: Sequence[float], h: Sequence[float]) -> list:
    """EOC_k = log(e_k / e_{k+1}) / log(h_k / h_{k+1}); None where undefined."""
    if len(values) != len(h):
        raise ValueError("values and h must have the same length")
    if len(values) < 2:
        raise ValueError("at least two levels are needed")
    out = []
    for k in range(len(values) - 1):
        e0, e1, h0, h1 = values[k], values[k + 1], h[k], h[k + 1]
        if not (e0 > 0 and e1 > 0) or h0 == h1:
            out.append(None)
        else:
            out.append(math.log(e0 / e1) / math.log(h0 / h1))
    return out


@dataclass
class ErrorReport:
    p: float
    level: int
    h: float
    n_dofs: int
    l_p: float
    w1p_semi: float
    w2ph: float
    w2ph_volume: float
    w2ph_jump: float
    interp_w2ph: float | None = None
    hessian_projection: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def best_approximation_proxies(space: FeSpace, exact: ExactSolution, p: float = 2.0, degree: int | None = None):
    """(||u - I_h u||_{W^{2,p}_h}, ||Pbar_h D^2 u - D^2 u||_{L^p})."""
    degree = _default_degree(space) if degree is None else degree
    interp = w2ph_norm(interpolate_nodal(space, exact.u), p, exact, degree)
    dg = FeSpace(space.mesh, space.degree, "discontinuous")
    proj = project_Pbar(dg, exact.hess, degree)
    cd = dg.cell_data(degree)
    ph = np.einsum("ijca,qa->ijcq", proj.local_coefficients(), cd.phi)
    diff = ph - exact.hess(cd.points[..., 0], cd.points[..., 1])
    frob = np.sqrt(np.einsum("ijcq,ijcq->cq", diff, diff))
    return interp, float(np.sum(cd.jxw * frob**p)) ** (1 / p)


def error_report(ctx_or_space, uh: FeFunction, exact: ExactSolution, p: float = 2.0, level: int = 0,
                 proxies: bool = False) -> ErrorReport:
    space = uh.space
    l, g = lp_norms(uh, p, exact)
    vol, jmp = w2ph_terms(uh, p, exact)
    rep = ErrorReport(p, level, space.mesh.h_max, space.n_dofs, l, g, vol + jmp, vol, jmp)
    if proxies:
        rep.interp_w2ph, rep.hessian_projection = best_approximation_proxies(space, exact, p)
    return rep


TABLE_NORMS = ("l_p", "w1p_semi", "w2ph", "w2ph_volume", "w2ph_jump")


def convergence_table(reports: Sequence[ErrorReport]) -> list[dict]:
    """Rows with level, h, n_dofs, every norm and its EOC against the previous level."""
    hs = [r.h for r in reports]
    eocs = {k: [None] + (estimate_order([getattr(r, k) for r in reports], hs) if len(reports) > 1 else [])
            for k in TABLE_NORMS}
    rows = []
    for i, r in enumerate(reports):
        row = {"level": r.level, "h": r.h, "n_dofs": r.n_dofs}
        for k in TABLE_NORMS:
            row[k] = getattr(r, k)
            row[f"eoc_{k}"] = eocs[k][i]
        rows.append(row)
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])
    return buf.getvalue()


def table_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)


def face_jump_weights(mesh, p: float) -> np.ndarray:
    """h_F^{1-p} per interior face, as used by the jump term."""
    return mesh.face_lengths[: mesh.n_interior_faces] ** (1 - p)


__all__ = [
    "ExactSolution",
    "ErrorReport",
    "w2ph_terms",
    "w2ph_norm",
    "lp_norms",
    "weighted_w2ph_norm",
    "lph_dual_norm_p2",
    "ph_l2_from_load",
    "estimate_order",
    "best_approximation_proxies",
    "error_report",
    "convergence_table",
    "table_csv",
    "table_json",
    "face_jump_weights",
]
