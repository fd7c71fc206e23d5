"""Lagrange P_r spaces on triangles.

``continuous`` is V_h (H^1_0-conforming, boundary nodes removed);
``discontinuous`` is the broken space Vbar_h with cell-local DOFs.
"""
from __future__ import annotations

import inspect
import json
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from math import factorial
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import splu

from .mesh import Mesh
from .quadrature import interval_rule, triangle_rule

KINDS = ("continuous", "discontinuous")


def _rational_inverse(rows) -> list[list[Fraction]]:
    """Gauss-Jordan inverse over the rationals."""
    n = len(rows)
    a = [[Fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(rows)]
    for col in range(n):
        piv = next(i for i in range(col, n) if a[i][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        p = a[col][col]
        a[col] = [v / p for v in a[col]]
        for i in range(n):
            if i != col and a[i][col] != 0:
                f = a[i][col]
                a[i] = [v - f * w for v, w in zip(a[i], a[col])]
    return [row[n:] for row in a]


def _to_array(rows, dtype) -> np.ndarray:
    if dtype is np.longdouble:
        return np.array(
            [[np.longdouble(str(v.numerator)) / np.longdouble(str(v.denominator)) for v in row] for row in rows]
        )
    return np.array([[float(v) for v in row] for row in rows])


def monomial_integral_exact(a: int, b: int) -> Fraction:
    return Fraction(factorial(a) * factorial(b), factorial(a + b + 2))


class LagrangeTriangle:
    """Nodal P_r basis on the reference triangle (0,0), (1,0), (0,1)."""

    def __init__(self, degree: int):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.degree = r = degree
        # barycentric integer labels (k0, k1, k2), k0 + k1 + k2 = r
        self.labels = [(r - i - j, i, j) for j in range(r + 1) for i in range(r + 1 - j)]
        self.nodes = np.array([(k1 / r, k2 / r) for _, k1, k2 in self.labels])
        self.exponents = [(a, b) for s in range(r + 1) for a in range(s, -1, -1) for b in (s - a,)]
        # exact rational Vandermonde inverse: basis_k = sum_m mono_m * coeffs[m, k]
        nodes_q = [(Fraction(k1, r), Fraction(k2, r)) for _, k1, k2 in self.labels]
        vander = [[x**a * y**b for a, b in self.exponents] for x, y in nodes_q]
        self.exact_coeffs = _rational_inverse(vander)
        self.coeffs = _to_array(self.exact_coeffs, float)
        self.coeffs_ld = _to_array(self.exact_coeffs, np.longdouble)

    @property
    def n_local(self) -> int:
        return len(self.labels)

    def reference_mass_inverse(self) -> list[list[Fraction]]:
        """Exact inverse of the mass matrix on the reference triangle."""
        n = self.n_local
        C = self.exact_coeffs
        mono = [[monomial_integral_exact(a + c, b + d) for c, d in self.exponents] for a, b in self.exponents]
        mass = [
            [sum(C[m][i] * C[k][j] * mono[m][k] for m in range(n) for k in range(n)) for j in range(n)]
            for i in range(n)
        ]
        return _rational_inverse(mass)

    def _coeffs_for(self, pts):
        return self.coeffs_ld if pts.dtype == np.longdouble else self.coeffs

    def _monomials(self, pts, dx=0, dy=0):
        pts = np.atleast_2d(pts)
        x, y = pts[:, 0], pts[:, 1]
        out = np.zeros((len(pts), len(self.exponents)), dtype=pts.dtype if pts.dtype == np.longdouble else float)
        for m, (a, b) in enumerate(self.exponents):
            if a < dx or b < dy:
                continue
            ca = np.prod(np.arange(a - dx + 1, a + 1)) if dx else 1.0
            cb = np.prod(np.arange(b - dy + 1, b + 1)) if dy else 1.0
            out[:, m] = ca * cb * x ** (a - dx) * y ** (b - dy)
        return out

    def values(self, pts) -> np.ndarray:
        """(npts, nloc)"""
        pts = np.atleast_2d(pts)
        return self._monomials(pts) @ self._coeffs_for(pts)

    def gradients(self, pts) -> np.ndarray:
        """(npts, nloc, 2) reference gradients"""
        pts = np.atleast_2d(pts)
        c = self._coeffs_for(pts)
        return np.stack([self._monomials(pts, 1, 0) @ c, self._monomials(pts, 0, 1) @ c], axis=-1)

    def hessians(self, pts) -> np.ndarray:
        """(npts, nloc, 2, 2) reference Hessians"""
        xx = self._monomials(pts, 2, 0) @ self.coeffs
        xy = self._monomials(pts, 1, 1) @ self.coeffs
        yy = self._monomials(pts, 0, 2) @ self.coeffs
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)


@dataclass
class CellData:
    """Quadrature data on every cell for one rule."""

    points: np.ndarray  # (nc, nq, 2) physical
    jxw: np.ndarray  # (nc, nq)
    phi: np.ndarray  # (nq, nloc)
    dphi: np.ndarray  # (nc, nq, nloc, 2) physical gradients
    degree: int

    @property
    def n_points(self) -> int:
        return self.points.shape[0] * self.points.shape[1]


@dataclass
class FaceData:
    """Quadrature data on every face, evaluated from both neighbours.

    Index 0 is the K+ side, index 1 the K- side (zeros on boundary faces).
    """

    points: np.ndarray  # (nf, nqf, 2)
    jxw: np.ndarray  # (nf, nqf)
    phi: np.ndarray  # (2, nf, nqf, nloc)
    dphi: np.ndarray  # (2, nf, nqf, nloc, 2)
    degree: int


class FeSpace:
    def __init__(self, mesh: Mesh, degree: int = 2, kind: str = "continuous"):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not 1 <= degree <= 4:
            raise ValueError("supported degrees are 1..4 (the schemes need r >= 2)")
        self.mesh = mesh
        self.degree = degree
        self.kind = kind
        self.element = LagrangeTriangle(degree)
        self._cell_cache: dict[int, CellData] = {}
        self._face_cache: dict[int, FaceData] = {}
        if kind == "discontinuous":
            nloc = self.element.n_local
            self.dof_map = np.arange(mesh.n_cells * nloc).reshape(mesh.n_cells, nloc)
            self.n_dofs = mesh.n_cells * nloc
        else:
            self._number_continuous()

    def __repr__(self):
        return f"FeSpace(P{self.degree}, {self.kind}, n_dofs={self.n_dofs})"

    def _number_continuous(self):
        mesh, el, r = self.mesh, self.element, self.degree
        boundary_edges = {tuple(f) for f in mesh.faces[mesh.n_interior_faces:]}
        on_bvertex = mesh.is_boundary_vertex()
        keys: dict[tuple, int] = {}
        is_bnd: list[bool] = []
        node_map = np.empty((mesh.n_cells, el.n_local), dtype=np.int64)
        for k, cell in enumerate(mesh.cells):
            for a, lab in enumerate(el.labels):
                support = sorted((int(cell[i]), lab[i]) for i in range(3) if lab[i] > 0)
                key = tuple(support)
                idx = keys.get(key)
                if idx is None:
                    idx = keys[key] = len(is_bnd)
                    if len(support) == 1:
                        is_bnd.append(bool(on_bvertex[support[0][0]]))
                    elif len(support) == 2:
                        is_bnd.append((support[0][0], support[1][0]) in boundary_edges)
                    else:
                        is_bnd.append(False)
                node_map[k, a] = idx
        is_bnd = np.array(is_bnd)
        free = np.full(len(is_bnd), -1, dtype=np.int64)
        free[~is_bnd] = np.arange(int((~is_bnd).sum()))
        self.node_map = node_map
        self.dof_map = free[node_map]
        self.n_dofs = int((~is_bnd).sum())

    # -- geometry --------------------------------------------------------
    @cached_property
    def jacobians(self):
        p = self.mesh.cell_vertices
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns
        det = np.linalg.det(J)
        inv = np.linalg.inv(J)
        return J, det, inv

    def to_physical(self, ref_pts: np.ndarray, cells=None) -> np.ndarray:
        J, _, _ = self.jacobians
        p0 = self.mesh.cell_vertices[:, 0]
        if cells is not None:
            J, p0 = J[cells], p0[cells]
        return p0[:, None, :] + np.einsum("cij,qj->cqi", J, ref_pts)

    @cached_property
    def dof_coordinates(self) -> np.ndarray:
        """Physical Lagrange node per DOF (continuous) or per local DOF (discontinuous)."""
        phys = self.to_physical(self.element.nodes)
        out = np.zeros((self.n_dofs, 2))
        mask = self.dof_map >= 0
        out[self.dof_map[mask]] = phys[mask]
        return out

    def cell_data(self, degree: int | None = None) -> CellData:
        degree = 2 * self.degree if degree is None else degree
        if degree not in self._cell_cache:
            rule = triangle_rule(degree)
            _, det, inv = self.jacobians
            phi = self.element.values(rule.points)
            dref = self.element.gradients(rule.points)
            dphi = np.einsum("qaj,cji->cqai", dref, inv)
            self._cell_cache[degree] = CellData(
                self.to_physical(rule.points), np.outer(det, rule.weights), phi, dphi, degree
            )
        return self._cell_cache[degree]

    def cell_hessians(self, ref_pts) -> np.ndarray:
        """(nc, nq, nloc, 2, 2) physical Hessians of the basis."""
        _, _, inv = self.jacobians
        href = self.element.hessians(ref_pts)
        return np.einsum("cki,qakl,clj->cqaij", inv, href, inv)

    def face_reference_points(self, t: np.ndarray, side: int) -> tuple[np.ndarray, np.ndarray]:
        """Reference coordinates on the K+ (side 0) or K- (side 1) cell of
        the face points a + t (b - a); returns (ref pts (nf, nt, 2), valid mask)."""
        mesh = self.mesh
        cells = mesh.face_cells[:, side]
        valid = cells >= 0
        a = mesh.vertices[mesh.faces[:, 0]]
        b = mesh.vertices[mesh.faces[:, 1]]
        x = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
        _, _, inv = self.jacobians
        c = np.where(valid, cells, 0)
        p0 = mesh.cell_vertices[c, 0]
        ref = np.einsum("fij,ftj->fti", inv[c], x - p0[:, None, :])
        # snap roundoff so points lie on the closed reference element
        ref = np.clip(ref, 0.0, 1.0)
        return ref, valid

    def face_data(self, degree: int | None = None) -> FaceData:
        degree = 2 * self.degree if degree is None else degree
        if degree not in self._face_cache:
            mesh = self.mesh
            rule = interval_rule(degree)
            t = rule.points[:, 0]
            nf, nt, nloc = mesh.n_faces, len(t), self.element.n_local
            a = mesh.vertices[mesh.faces[:, 0]]
            b = mesh.vertices[mesh.faces[:, 1]]
            pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
            jxw = np.outer(mesh.face_lengths, rule.weights)
            phi = np.zeros((2, nf, nt, nloc))
            dphi = np.zeros((2, nf, nt, nloc, 2))
            _, _, inv = self.jacobians
            for side in (0, 1):
                ref, valid = self.face_reference_points(t, side)
                cells = mesh.face_cells[valid, side]
                flat = ref[valid].reshape(-1, 2)
                v = self.element.values(flat).reshape(-1, nt, nloc)
                g = self.element.gradients(flat).reshape(-1, nt, nloc, 2)
                phi[side, valid] = v
                dphi[side, valid] = np.einsum("ftaj,fji->ftai", g, inv[cells])
            self._face_cache[degree] = FaceData(pts, jxw, phi, dphi, degree)
        return self._face_cache[degree]

    # -- global operators --------------------------------------------------
    def _cell_operator(self, local: np.ndarray) -> sp.csr_matrix:
        """Sparse map DOFs -> values at all (cell, point) pairs from local
        tables of shape (nc, nq, nloc)."""
        nc, nq, nloc = local.shape
        rows = np.broadcast_to(np.arange(nc * nq).reshape(nc, nq, 1), local.shape)
        cols = np.broadcast_to(self.dof_map[:, None, :], local.shape)
        keep = cols >= 0
        return sp.csr_matrix(
            (local[keep], (rows[keep], cols[keep])), shape=(nc * nq, self.n_dofs)
        )

    def eval_matrix(self, degree: int | None = None) -> sp.csr_matrix:
        cd = self.cell_data(degree)
        nc = self.mesh.n_cells
        return self._cell_operator(np.broadcast_to(cd.phi, (nc,) + cd.phi.shape))

    def grad_matrices(self, degree: int | None = None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        cd = self.cell_data(degree)
        return self._cell_operator(cd.dphi[..., 0]), self._cell_operator(cd.dphi[..., 1])

    def hessian_matrices(self, degree: int | None = None):
        """Elementwise Hessian maps ((xx, xy), (yx, yy)) to quadrature values."""
        rule = triangle_rule(2 * self.degree if degree is None else degree)
        h = self.cell_hessians(rule.points)
        return [[self._cell_operator(h[..., i, j]) for j in range(2)] for i in range(2)]

    @cached_property
    def mass_matrix(self) -> sp.csr_matrix:
        cd = self.cell_data()
        return self._assemble_local(np.einsum("cq,qa,qb->cab", cd.jxw, cd.phi, cd.phi))

    @cached_property
    def stiffness_matrix(self) -> sp.csr_matrix:
        cd = self.cell_data()
        return self._assemble_local(np.einsum("cq,cqai,cqbi->cab", cd.jxw, cd.dphi, cd.dphi))

    def _assemble_local(self, blocks: np.ndarray) -> sp.csr_matrix:
        rows = np.broadcast_to(self.dof_map[:, :, None], blocks.shape)
        cols = np.broadcast_to(self.dof_map[:, None, :], blocks.shape)
        keep = (rows >= 0) & (cols >= 0)
        m = sp.coo_matrix((blocks[keep], (rows[keep], cols[keep])), shape=(self.n_dofs, self.n_dofs))
        return m.tocsr()

    @cached_property
    def local_mass(self) -> np.ndarray:
        """(nc, nloc, nloc) cell mass matrices"""
        cd = self.cell_data()
        return np.einsum("cq,qa,qb->cab", cd.jxw, cd.phi, cd.phi)

    @cached_property
    def local_mass_inverse(self) -> np.ndarray:
        eye = np.eye(self.element.n_local)
        return np.stack([cho_solve(cho_factor(m), eye) for m in self.local_mass])

    @cached_property
    def mass_solver(self):
        if self.kind == "discontinuous":
            raise TypeError("use local_mass_inverse for the discontinuous space")
        return splu(self.mass_matrix.tocsc())

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        if self.kind == "discontinuous":
            nc, nloc = self.dof_map.shape
            x = np.einsum("cab,cb...->ca...", self.local_mass_inverse, rhs.reshape(nc, nloc, *rhs.shape[1:]))
            return x.reshape(rhs.shape)
        return self.mass_solver.solve(rhs)

    def load_vector(self, values: np.ndarray, degree: int | None = None) -> np.ndarray:
        """(f, phi_i) from quadrature values shaped (nc, nq)."""
        cd = self.cell_data(degree)
        local = np.einsum("cq,cq,qa->ca", cd.jxw, values, cd.phi)
        out = np.zeros(self.n_dofs)
        keep = self.dof_map >= 0
        np.add.at(out, self.dof_map[keep], local[keep])
        return out

    def function(self, coefficients=None) -> "FeFunction":
        c = np.zeros(self.n_dofs) if coefficients is None else np.asarray(coefficients, dtype=float)
        return FeFunction(self, c)


@dataclass(frozen=True, eq=False)
class FeFunction:
    space: FeSpace
    coefficients: np.ndarray  # (..., n_dofs); leading axes hold tensor components

    def __post_init__(self):
        if self.coefficients.shape[-1] != self.space.n_dofs:
            raise ValueError(
                f"coefficient vector has length {self.coefficients.shape[-1]}, space has {self.space.n_dofs} DOFs"
            )

    def local_coefficients(self) -> np.ndarray:
        """(..., nc, nloc), zero at removed boundary nodes"""
        dm = self.space.dof_map
        c = self.coefficients[..., np.where(dm >= 0, dm, 0)]
        return np.where(dm >= 0, c, 0.0)

    def eval(self, cell_id: int, reference_point, gradient: bool = False):
        xi = np.asarray(reference_point, dtype=float)
        tol = 1e-12
        if xi.shape != (2,) or xi.min() < -tol or xi.sum() > 1 + tol:
            raise ValueError(f"point {reference_point} is outside the reference triangle")
        coef = self.local_coefficients()[..., cell_id, :]
        el = self.space.element
        val = coef @ el.values(xi[None])[0]
        if not gradient:
            return val
        _, _, inv = self.space.jacobians
        g = el.gradients(xi[None])[0] @ inv[cell_id]
        return val, coef @ g

    def at_quadrature(self, degree: int | None = None) -> np.ndarray:
        cd = self.space.cell_data(degree)
        return np.einsum("...ca,qa->...cq", self.local_coefficients(), cd.phi)

    def gradient_at_quadrature(self, degree: int | None = None) -> np.ndarray:
        cd = self.space.cell_data(degree)
        return np.einsum("...ca,cqai->...cqi", self.local_coefficients(), cd.dphi)

    def l2_norm(self) -> float:
        cd = self.space.cell_data()
        v = self.at_quadrature()
        return float(np.sqrt(np.sum(cd.jxw * v**2)))

    def vertex_values(self) -> np.ndarray:
        """Average of cell values at each mesh vertex (for plotting)."""
        mesh = self.space.mesh
        vals = self.local_coefficients() @ self.space.element.values(
            np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ).T
        acc = np.zeros(mesh.n_vertices)
        cnt = np.zeros(mesh.n_vertices)
        np.add.at(acc, mesh.cells.ravel(), vals.ravel())
        np.add.at(cnt, mesh.cells.ravel(), 1.0)
        return acc / cnt

    def to_json(self) -> dict:
        return {
            "space": {"degree": self.space.degree, "kind": self.space.kind},
            "coefficients": [float(x) for x in np.ravel(self.coefficients)],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    def write_vtk(self, path, name: str = "u") -> None:
        mesh = self.space.mesh
        vals = self.vertex_values()
        out = ["# vtk DataFile Version 3.0", name, "ASCII", "DATASET UNSTRUCTURED_GRID"]
        out.append(f"POINTS {mesh.n_vertices} double")
        out += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
        out.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
        out += [f"3 {i} {j} {k}" for i, j, k in mesh.cells]
        out.append(f"CELL_TYPES {mesh.n_cells}")
        out += ["5"] * mesh.n_cells
        out += [f"POINT_DATA {mesh.n_vertices}", f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [f"{v:.17g}" for v in vals]
        Path(path).write_text("\n".join(out) + "\n")


# -- projections and interpolation ------------------------------------------

def _takes_cells(f) -> bool:
    """True if f accepts a third positional argument without a default."""
    try:
        params = list(inspect.signature(f).parameters.values())
    except (TypeError, ValueError):
        return False
    if any(p.kind is p.VAR_POSITIONAL for p in params):
        return True
    positional = [p for p in params if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    return len(positional) >= 3 and positional[2].default is inspect.Parameter.empty


def _field_at_quadrature(space: FeSpace, f, degree):
    cd = space.cell_data(degree)
    x, y = cd.points[..., 0], cd.points[..., 1]
    cells = np.broadcast_to(np.arange(space.mesh.n_cells)[:, None], x.shape)
    vals = f(x, y, cells) if _takes_cells(f) else f(x, y)
    return np.broadcast_to(np.asarray(vals, dtype=float), x.shape)


def project_Ph(space: FeSpace, f, degree: int | None = None) -> FeFunction:
    """L2-orthogonal projection onto V_h of a callable f(x, y[, cells])."""
    if space.kind != "continuous":
        raise TypeError("project_Ph expects the continuous space V_h")
    degree = 2 * space.degree + 2 if degree is None else degree
    vals = _field_at_quadrature(space, f, degree)
    rhs = space.load_vector(vals, degree)
    return FeFunction(space, space.solve_mass(rhs))


def project_Pbar(space: FeSpace, field, degree: int | None = None) -> FeFunction:
    """Cellwise L2 projection onto Vbar_h of a field returning shape
    (..., nc, nq) (e.g. (2, 2, nc, nq) for a matrix field)."""
    if space.kind != "discontinuous":
        raise TypeError("project_Pbar expects the discontinuous space Vbar_h")
    degree = 2 * space.degree + 2 if degree is None else degree
    cd = space.cell_data(degree)
    x, y = cd.points[..., 0], cd.points[..., 1]
    vals = np.asarray(field(x, y), dtype=float)
    vals = np.broadcast_to(vals, vals.shape[:-2] + x.shape)
    rhs = np.einsum("cq,...cq,qa->...ca", cd.jxw, vals, cd.phi)
    coef = np.einsum("cab,...cb->...ca", space.local_mass_inverse, rhs)
    return FeFunction(space, coef.reshape(coef.shape[:-2] + (-1,)))


def interpolate_nodal(space: FeSpace, u) -> FeFunction:
    """Nodal interpolant; boundary DOFs of V_h are dropped (zero trace)."""
    xy = space.dof_coordinates
    vals = np.asarray(u(xy[:, 0], xy[:, 1]), dtype=float)
    return FeFunction(space, np.broadcast_to(vals, (space.n_dofs,)).copy())
