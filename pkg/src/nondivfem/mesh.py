"""Conforming triangulations of 2D polygons.

Cells are numbered lexicographically by centroid. For an interior face the
adjacent cell with the larger index is ``K+`` and the stored normal points
out of ``K+`` (towards the smaller-index cell). Face vertices are stored
with the smaller global vertex index first; both neighbours parameterize
the face from that vertex, so quadrature points coincide physically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quadrature import interval_rule

DOMAIN_TAGS = ("unit-square", "l-shape", "custom-polygon")
POLYGON_AREA = {"unit-square": 1.0, "l-shape": 0.75}


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3), counterclockwise
    domain_tag: str = "custom-polygon"
    # filled in __post_init__
    faces: np.ndarray = field(init=False, repr=False)  # (nf, 2) vertex ids, low id first
    face_cells: np.ndarray = field(init=False, repr=False)  # (nf, 2) [K+, K-]; K- = -1 on boundary
    normals: np.ndarray = field(init=False, repr=False)
    face_lengths: np.ndarray = field(init=False, repr=False)
    n_interior_faces: int = field(init=False)
    cell_faces: np.ndarray = field(init=False, repr=False)  # (nc, 3) face opposite local vertex k

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        c = np.ascontiguousarray(self.cells, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if c.ndim != 2 or c.shape[1] != 3:
            raise MeshError("cells must have shape (nc, 3)")
        if c.size and (c.min() < 0 or c.max() >= len(v)):
            raise MeshError("cell references a missing vertex")
        c = _orient_ccw(v, c)
        c = c[_centroid_order(v, c)]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "cells", c)
        if self.domain_tag not in DOMAIN_TAGS:
            raise MeshError(f"unknown domain tag {self.domain_tag!r}")
        self._build_faces()

    def _build_faces(self):
        c = self.cells
        nc = len(c)
        # local face k is opposite local vertex k
        local = np.array([[1, 2], [2, 0], [0, 1]])
        edges = c[:, local].reshape(-1, 2)
        edges_sorted = np.sort(edges, axis=1)
        owner = np.repeat(np.arange(nc), 3)
        uniq, inverse, counts = np.unique(
            edges_sorted, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.ravel()
        if counts.max() > 2:
            raise MeshError("non-manifold mesh: a face is shared by more than two cells")
        nf = len(uniq)
        pair = np.full((nf, 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        slot = np.zeros(nf, dtype=np.int64)
        for idx in order:
            f = inverse[idx]
            pair[f, slot[f]] = owner[idx]
            slot[f] += 1
        interior = counts == 2
        kplus = np.where(interior, pair.max(axis=1), pair[:, 0])
        kminus = np.where(interior, pair.min(axis=1), -1)
        # interior faces first, in a deterministic order
        perm = np.lexsort((uniq[:, 1], uniq[:, 0], ~interior))
        uniq, kplus, kminus = uniq[perm], kplus[perm], kminus[perm]
        newid = np.empty(nf, dtype=np.int64)
        newid[perm] = np.arange(nf)
        cell_faces = newid[inverse].reshape(nc, 3)

        p0 = self.vertices[uniq[:, 0]]
        p1 = self.vertices[uniq[:, 1]]
        t = p1 - p0
        lengths = np.hypot(t[:, 0], t[:, 1])
        n = np.column_stack([t[:, 1], -t[:, 0]]) / lengths[:, None]
        # flip so n points out of K+
        cen = self.vertices[c].mean(axis=1)
        mid = 0.5 * (p0 + p1)
        sign = np.sign(np.einsum("ij,ij->i", n, mid - cen[kplus]))
        n *= sign[:, None]

        object.__setattr__(self, "faces", uniq)
        object.__setattr__(self, "face_cells", np.column_stack([kplus, kminus]))
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "face_lengths", lengths)
        object.__setattr__(self, "n_interior_faces", int(interior.sum()))
        object.__setattr__(self, "cell_faces", cell_faces)

    # -- basic queries -------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def interior_faces(self) -> np.ndarray:
        return np.arange(self.n_interior_faces)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.arange(self.n_interior_faces, self.n_faces)

    @property
    def cell_vertices(self) -> np.ndarray:
        return self.vertices[self.cells]

    @property
    def centroids(self) -> np.ndarray:
        return self.cell_vertices.mean(axis=1)

    @property
    def areas(self) -> np.ndarray:
        p = self.cell_vertices
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def diameters(self) -> np.ndarray:
        p = self.cell_vertices
        d = [np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return np.max(d, axis=0)

    @property
    def inradii(self) -> np.ndarray:
        p = self.cell_vertices
        perim = sum(np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0)))
        return 2.0 * self.areas / perim

    @property
    def h_max(self) -> float:
        return float(self.diameters.max())

    @property
    def quasi_uniformity(self) -> float:
        """max cell diameter / min cell inradius"""
        return float(self.diameters.max() / self.inradii.min())

    @property
    def boundary_length(self) -> float:
        return float(self.face_lengths[self.n_interior_faces:].sum())

    def is_boundary_vertex(self) -> np.ndarray:
        flag = np.zeros(self.n_vertices, dtype=bool)
        flag[self.faces[self.n_interior_faces:].ravel()] = True
        return flag

    def euler_characteristic(self) -> int:
        return self.n_cells + self.n_vertices - self.n_faces

    def stats(self) -> dict:
        return {
            "domain": self.domain_tag,
            "n_vertices": self.n_vertices,
            "n_cells": self.n_cells,
            "n_interior_faces": self.n_interior_faces,
            "n_boundary_faces": self.n_faces - self.n_interior_faces,
            "h_max": self.h_max,
            "quasi_uniformity": self.quasi_uniformity,
        }


def _orient_ccw(v, c):
    p = v[c]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det == 0.0):
        raise MeshError("degenerate cell with zero area")
    c = c.copy()
    flip = det < 0
    c[flip] = c[flip][:, [0, 2, 1]]
    return c


def _centroid_order(v, c):
    cen = np.round(v[c].mean(axis=1), 12)
    return np.lexsort((cen[:, 1], cen[:, 0]))


def face_geometry(mesh: Mesh, face_id: int, degree: int = 4):
    """Normal, length and physical quadrature points/weights of one face."""
    if not 0 <= face_id < mesh.n_faces:
        raise IndexError(f"face id {face_id} out of range [0, {mesh.n_faces})")
    a, b = mesh.vertices[mesh.faces[face_id]]
    rule = interval_rule(degree)
    t = rule.points[:, 0]
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    h = float(mesh.face_lengths[face_id])
    return mesh.normals[face_id].copy(), h, pts, rule.weights * h


# -- construction -------------------------------------------------------

def build_structured(domain_tag: str, n: int) -> Mesh:
    """Uniform mesh with ``n`` squares per unit edge, each split along the
    (i, j)-(i+1, j+1) diagonal."""
    if int(n) != n or n < 1:
        raise MeshError("n must be a positive integer")
    n = int(n)
    if domain_tag == "unit-square":
        keep = lambda i, j: True  # noqa: E731
    elif domain_tag == "l-shape":
        if n % 2:
            raise MeshError(f"l-shape requires an even number of subdivisions, got n={n}")
        half = n // 2
        keep = lambda i, j: not (i >= half and j >= half)  # noqa: E731
    else:
        raise MeshError(f"structured meshes exist only for unit-square and l-shape, not {domain_tag!r}")

    vid = lambda i, j: j * (n + 1) + i  # noqa: E731
    cells = []
    for j in range(n):
        for i in range(n):
            if not keep(i, j):
                continue
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((a, b, c))
            cells.append((a, c, d))
    cells = np.array(cells, dtype=np.int64)
    jj, ii = np.divmod(np.arange((n + 1) ** 2), n + 1)
    verts = np.column_stack([ii / n, jj / n])
    used = np.unique(cells)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(verts[used], remap[cells], domain_tag)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle is split into four congruent children."""
    nv = mesh.n_vertices
    mid = nv + mesh.cell_faces  # midpoint of face opposite local vertex k
    midpoints = 0.5 * (mesh.vertices[mesh.faces[:, 0]] + mesh.vertices[mesh.faces[:, 1]])
    verts = np.vstack([mesh.vertices, midpoints])
    v0, v1, v2 = mesh.cells.T
    m12, m20, m01 = mid.T
    children = np.concatenate(
        [
            np.column_stack([v0, m01, m20]),
            np.column_stack([m01, v1, m12]),
            np.column_stack([m20, m12, v2]),
            np.column_stack([m01, m12, m20]),
        ]
    )
    return Mesh(verts, children, mesh.domain_tag)


# -- text format --------------------------------------------------------

def export_mesh(mesh: Mesh, path) -> None:
    lines = [f"mesh 2 {mesh.n_vertices} {mesh.n_cells}"]
    lines += [f"v {x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"c {i} {j} {k}" for i, j, k in mesh.cells]
    Path(path).write_text("\n".join(lines) + "\n")


def import_mesh(path, domain_tag: str = "custom-polygon") -> Mesh:
    text = Path(path).read_text()
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][:2] != ["mesh", "2"] or len(rows[0]) != 4:
        raise MeshError("mesh file must start with 'mesh 2 <nv> <nc>'")
    nv, nc = int(rows[0][2]), int(rows[0][3])
    vrows = [r for r in rows[1:] if r[0] == "v"]
    crows = [r for r in rows[1:] if r[0] == "c"]
    if len(vrows) != nv or len(crows) != nc:
        raise MeshError(f"header announces {nv} vertices / {nc} cells, found {len(vrows)} / {len(crows)}")
    verts = np.array([[float(r[1]), float(r[2])] for r in vrows])
    cells = np.array([[int(r[1]), int(r[2]), int(r[3])] for r in crows], dtype=np.int64)
    return Mesh(verts, cells, domain_tag)
