"""Discrete partial derivatives and the discrete Hessian.

For a broken field v the lifted derivative phi in Vbar_h is defined by

    (phi, psi) = <{v} n_i, [psi]>_{all faces} - (v, d_i psi)          (average form)
               = -<[v] n_i, {psi}>_{interior faces} + (d_i v, psi)    (jump form)

for every psi in Vbar_h. On boundary faces {v} = [v] = v+. Both forms are
assembled as sparse matrices and applied through cellwise mass inverses.
The discrete Hessian is H_ij(u) = lift_j((grad u)_i).
"""
from __future__ import annotations

from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fe_space import FeFunction, FeSpace
from .quadrature import precise_interval_rule, precise_triangle_rule
from .mesh import Mesh

FORMS = ("average", "jump")


LD = np.longdouble


def _block_matrix(row_space, col_space, row_cells, col_cells, blocks):
    """COO assembly of dense (nrow_loc x ncol_loc) blocks coupling cells."""
    rd = row_space.dof_map[row_cells]  # (nb, nr)
    cd = col_space.dof_map[col_cells]  # (nb, nc)
    rows = np.broadcast_to(rd[:, :, None], blocks.shape)
    cols = np.broadcast_to(cd[:, None, :], blocks.shape)
    keep = (rows >= 0) & (cols >= 0)
    return sp.coo_matrix(
        (np.asarray(blocks[keep], dtype=float), (rows[keep], cols[keep])),
        shape=(row_space.n_dofs, col_space.n_dofs),
    )


class _Geometry:
    """Affine cell maps and face data in extended precision."""

    def __init__(self, mesh: Mesh):
        p = mesh.vertices.astype(LD)[mesh.cells]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        self.p0 = p[:, 0]
        self.det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        inv = np.empty((mesh.n_cells, 2, 2), dtype=LD)
        inv[:, 0, 0], inv[:, 0, 1] = e2[:, 1], -e2[:, 0]
        inv[:, 1, 0], inv[:, 1, 1] = -e1[:, 1], e1[:, 0]
        self.inv = inv / self.det[:, None, None]
        a = mesh.vertices.astype(LD)[mesh.faces[:, 0]]
        b = mesh.vertices.astype(LD)[mesh.faces[:, 1]]
        t = b - a
        self.face_start, self.face_vec = a, t
        self.lengths = np.sqrt(t[:, 0] ** 2 + t[:, 1] ** 2)
        n = np.column_stack([t[:, 1], -t[:, 0]]) / self.lengths[:, None]
        sign = np.sign(np.einsum("ij,ij->i", n.astype(float), mesh.normals))
        self.normals = n * sign[:, None].astype(LD)


class _Blocks:
    """Dense blocks coupling (row cell, column cell) pairs, one per pair."""

    def __init__(self, row_cells, col_cells, blocks, n_cells):
        keys = row_cells * n_cells + col_cells
        uniq, inverse = np.unique(keys, return_inverse=True)
        summed = np.zeros((len(uniq),) + blocks.shape[1:], dtype=blocks.dtype)
        np.add.at(summed, inverse.ravel(), blocks)
        self.row_cells, self.col_cells = np.divmod(uniq, n_cells)
        self.blocks = summed

    def sparse(self, row_space, col_space) -> sp.csr_matrix:
        return _block_matrix(row_space, col_space, self.row_cells, self.col_cells, self.blocks).tocsr()

    def apply(self, x: np.ndarray, row_space, col_space) -> np.ndarray:
        """Extended-precision product, rounded to float64 once."""
        cd = col_space.dof_map[self.col_cells]
        vals = np.where(cd >= 0, x.astype(LD)[np.where(cd >= 0, cd, 0)], LD(0))
        contrib = np.einsum("kab,kb->ka", self.blocks, vals)
        rd = row_space.dof_map[self.row_cells]
        out = np.zeros(row_space.n_dofs, dtype=LD)
        keep = rd >= 0
        np.add.at(out, rd[keep], contrib[keep])
        return out.astype(float)


class LiftingOperator:
    """Materialized lifting maps for one mesh and target degree r.

    Blocks are computed in extended precision with the exact reference
    mass inverse and rounded to float64 once, when the sparse map is formed.
    """

    def __init__(self, mesh: Mesh, degree: int = 2):
        self.mesh = mesh
        self.degree = degree
        self.target = FeSpace(mesh, degree, "discontinuous")
        self._cache: dict = {}

    @cached_property
    def _geometry(self) -> _Geometry:
        return _Geometry(self.mesh)

    @cached_property
    def _mass_inverse_ref(self) -> np.ndarray:
        from .fe_space import _to_array

        return _to_array(self.target.element.reference_mass_inverse(), np.longdouble)

    def _check_source(self, source: FeSpace):
        if source.mesh is not self.mesh:
            raise ValueError("source field lives on a different mesh than the lifting target")

    def _rhs_blocks(self, axis: int, form: str, source: FeSpace) -> _Blocks:
        if axis not in (0, 1):
            raise ValueError("axis must be 0 (x) or 1 (y)")
        if form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        self._check_source(source)
        key = ("rhs", axis, form, source.degree)
        if key in self._cache:
            return self._cache[key]
        mesh, g = self.mesh, self._geometry
        tel, sel = self.target.element, source.element
        qdeg = tel.degree + sel.degree
        cells = np.arange(mesh.n_cells)

        rule = precise_triangle_rule(qdeg)
        qp = rule.points
        jxw = g.det[:, None] * rule.weights[None, :]
        if form == "average":
            dpsi = np.einsum("qaj,cj->cqa", tel.gradients(qp), g.inv[:, :, axis])
            vol = -np.einsum("cq,cqa,qb->cab", jxw, dpsi, sel.values(qp))
        else:
            dv = np.einsum("qbj,cj->cqb", sel.gradients(qp), g.inv[:, :, axis])
            vol = np.einsum("cq,qa,cqb->cab", jxw, tel.values(qp), dv)
        rows, cols, blocks = [cells], [cells], [vol]

        frule = precise_interval_rule(qdeg)
        t = frule.points[:, 0]
        fjxw = g.lengths[:, None] * frule.weights[None, :]
        x = g.face_start[:, None, :] + t[None, :, None] * g.face_vec[:, None, :]
        nI = mesh.n_interior_faces
        kp, km = mesh.face_cells[:, 0], mesh.face_cells[:, 1]

        def traces(element, faces, cells_):
            ref = np.einsum("fij,ftj->fti", g.inv[cells_], x[faces] - g.p0[cells_][:, None, :])
            nf, nt = ref.shape[:2]
            return element.values(ref.reshape(-1, 2)).reshape(nf, nt, -1)

        I = np.arange(nI)
        side_cells = (kp[I], km[I])
        tt = [traces(tel, I, c) for c in side_cells]
        st = [traces(sel, I, c) for c in side_cells]
        n_i = g.normals[I, axis][:, None, None]
        if form == "average":
            # <{v} n_i, [psi]>: psi+ with +, psi- with -, {v} = (v+ + v-)/2
            signs = {(0, 0): 0.5, (0, 1): 0.5, (1, 0): -0.5, (1, 1): -0.5}
        else:
            # -<[v] n_i, {psi}>: [v] = v+ - v-, {psi} = (psi+ + psi-)/2
            signs = {(0, 0): -0.5, (0, 1): 0.5, (1, 0): -0.5, (1, 1): 0.5}
        for (ts, ss), s in signs.items():
            blk = np.einsum("fq,fqa,fqb->fab", fjxw[I], tt[ts], st[ss])
            rows.append(side_cells[ts])
            cols.append(side_cells[ss])
            blocks.append(LD(s) * n_i * blk)
        if form == "average":
            B = np.arange(nI, mesh.n_faces)
            blk = np.einsum("fq,fqa,fqb->fab", fjxw[B], traces(tel, B, kp[B]), traces(sel, B, kp[B]))
            rows.append(kp[B])
            cols.append(kp[B])
            blocks.append(g.normals[B, axis][:, None, None] * blk)
        out = _Blocks(np.concatenate(rows), np.concatenate(cols), np.concatenate(blocks), mesh.n_cells)
        self._cache[key] = out
        return out

    def _lift_blocks(self, axis: int, form: str, source: FeSpace) -> _Blocks:
        key = ("lift", axis, form, source.degree)
        if key not in self._cache:
            rhs = self._rhs_blocks(axis, form, source)
            lifted = _Blocks.__new__(_Blocks)
            lifted.row_cells, lifted.col_cells = rhs.row_cells, rhs.col_cells
            scale = self._geometry.det[rhs.row_cells][:, None, None]
            lifted.blocks = np.einsum("ab,kbc->kac", self._mass_inverse_ref, rhs.blocks) / scale
            self._cache[key] = lifted
        return self._cache[key]

    def rhs_matrix(self, axis: int, form: str = "average", source: FeSpace | None = None) -> sp.csr_matrix:
        """Right-hand side of the defining equations, before the mass solve."""
        source = self.target if source is None else source
        return self._rhs_blocks(axis, form, source).sparse(self.target, source)

    def matrix(self, axis: int, form: str = "average", source: FeSpace | None = None) -> sp.csr_matrix:
        """Broken-field coefficients in ``source`` -> lifted derivative in Vbar_h."""
        source = self.target if source is None else source
        if source.kind != "discontinuous":
            raise TypeError("lifting sources are broken (discontinuous) fields")
        key = ("matrix", axis, form, source.degree)
        if key not in self._cache:
            self._cache[key] = self._lift_blocks(axis, form, source).sparse(self.target, source)
        return self._cache[key]

    def _gradient_blocks(self, space: FeSpace, axis: int) -> np.ndarray:
        """(nc, n_target_nodes, nloc): d_axis of V_h basis at the Vbar_h nodes,
        an exact representation since the derivative has degree r - 1."""
        r = self.target.degree
        nodes = np.array([(k1, k2) for _, k1, k2 in self.target.element.labels], dtype=LD) / LD(r)
        dref = space.element.gradients(nodes)
        return np.einsum("taj,cj->cta", dref, self._geometry.inv[:, :, axis])

    def gradient_map(self, space: FeSpace, axis: int) -> sp.csr_matrix:
        self._check_source(space)
        key = ("grad", axis, space.kind, space.degree)
        if key not in self._cache:
            cells = np.arange(self.mesh.n_cells)
            self._cache[key] = _block_matrix(
                self.target, space, cells, cells, self._gradient_blocks(space, axis)
            ).tocsr()
        return self._cache[key]

    def _hessian_blocks(self, space: FeSpace, i: int, j: int, form: str) -> _Blocks:
        self._check_source(space)
        key = ("hess-blocks", i, j, form, space.kind, space.degree)
        if key not in self._cache:
            lift = self._lift_blocks(j, form, self.target)
            grad = self._gradient_blocks(space, i)
            out = _Blocks.__new__(_Blocks)
            out.row_cells, out.col_cells = lift.row_cells, lift.col_cells
            out.blocks = np.einsum("kab,kbc->kac", lift.blocks, grad[lift.col_cells])
            self._cache[key] = out
        return self._cache[key]

    def hessian_maps(self, space: FeSpace, form: str = "average"):
        """H[i][j]: V_h coefficients -> Vbar_h coefficients of lift_j((grad u)_i)."""
        key = ("hess", form, space.kind, space.degree)
        if key not in self._cache:
            self._cache[key] = [
                [self._hessian_blocks(space, i, j, form).sparse(self.target, space) for j in range(2)]
                for i in range(2)
            ]
        return self._cache[key]

    def apply_hessian(self, space: FeSpace, coefficients: np.ndarray, form: str = "average") -> np.ndarray:
        """(2, 2, n_dofs) discrete Hessian coefficients, applied cell by cell."""
        return np.stack(
            [
                np.stack([self._hessian_blocks(space, i, j, form).apply(coefficients, self.target, space) for j in range(2)])
                for i in range(2)
            ]
        )

    def apply_lift(self, source: FeSpace, coefficients: np.ndarray, axis: int, form: str = "average") -> np.ndarray:
        self._check_source(source)
        if source.kind != "discontinuous":
            raise TypeError("lifting sources are broken (discontinuous) fields")
        return self._lift_blocks(axis, form, source).apply(coefficients, self.target, source)

    def dump(self, path, space: FeSpace) -> None:
        """Write the Hessian maps as 'component row col value' lines."""
        lines = []
        for i in range(2):
            for j in range(2):
                m = self.hessian_maps(space)[i][j].tocoo()
                lines += [f"H{i}{j} {r} {c} {v:.17g}" for r, c, v in zip(m.row, m.col, m.data)]
        Path(path).write_text("\n".join(lines) + "\n")


def _as_source(lifting: LiftingOperator, v: FeFunction) -> FeFunction:
    if v.space.mesh is not lifting.mesh:
        raise ValueError("source field lives on a different mesh than the lifting target")
    if v.space.kind == "continuous":
        # embed V_h into the broken space of the same degree
        dg = FeSpace(lifting.mesh, v.space.degree, "discontinuous")
        return FeFunction(dg, v.local_coefficients().reshape(v.coefficients.shape[:-1] + (-1,)))
    return v


def lift_partial(lifting: LiftingOperator, v: FeFunction, axis: int) -> FeFunction:
    """Lifted derivative from the average (defining) form."""
    v = _as_source(lifting, v)
    return FeFunction(lifting.target, lifting.apply_lift(v.space, v.coefficients, axis, "average"))


def lift_partial_equivalent(lifting: LiftingOperator, v: FeFunction, axis: int) -> FeFunction:
    """Lifted derivative from the jump form; must agree with lift_partial."""
    v = _as_source(lifting, v)
    return FeFunction(lifting.target, lifting.apply_lift(v.space, v.coefficients, axis, "jump"))


def discrete_gradient(lifting: LiftingOperator, v: FeFunction) -> FeFunction:
    comps = [lift_partial(lifting, v, i).coefficients for i in range(2)]
    return FeFunction(lifting.target, np.stack(comps))


def discrete_hessian(lifting: LiftingOperator, u: FeFunction, form: str = "average") -> FeFunction:
    """Matrix-valued Vbar_h function with coefficients shaped (2, 2, n_dofs)."""
    if u.space.kind != "continuous":
        raise TypeError("discrete_hessian expects a function in V_h")
    return FeFunction(lifting.target, lifting.apply_hessian(u.space, u.coefficients, form))
