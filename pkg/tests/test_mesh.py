import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nondivfem.mesh import (
    Mesh,
    MeshError,
    build_structured,
    export_mesh,
    face_geometry,
    import_mesh,
    refine_uniform,
)


@pytest.mark.parametrize("n", [1, 2, 3, 8])
def test_unit_square_counts(n):
    m = build_structured("unit-square", n)
    assert m.n_vertices == (n + 1) ** 2
    assert m.n_cells == 2 * n * n
    assert m.n_faces == 3 * n * n + 2 * n
    assert m.n_interior_faces == 3 * n * n - 2 * n
    assert m.euler_characteristic() == 1
    assert m.areas.sum() == pytest.approx(1.0)
    assert m.boundary_length == pytest.approx(4.0)
    assert m.h_max == pytest.approx(np.sqrt(2) / n)


@pytest.mark.parametrize("n", [2, 4, 6])
def test_l_shape(n):
    m = build_structured("l-shape", n)
    assert m.n_cells == 6 * (n // 2) ** 2
    assert m.areas.sum() == pytest.approx(0.75)
    assert m.boundary_length == pytest.approx(4.0)
    assert m.euler_characteristic() == 1


def test_l_shape_odd_rejected_and_unknown_tag():
    with pytest.raises(MeshError):
        build_structured("l-shape", 3)
    with pytest.raises(MeshError):
        build_structured("disc", 2)
    with pytest.raises(MeshError):
        build_structured("unit-square", 0)


@pytest.mark.parametrize("tag,n", [("unit-square", 4), ("l-shape", 4)])
def test_face_conventions(tag, n):
    m = build_structured(tag, n)
    kp, km = m.face_cells.T
    ni = m.n_interior_faces
    assert np.all(km[:ni] >= 0) and np.all(km[ni:] == -1)
    assert np.all(kp[:ni] > km[:ni])
    # normal points away from the centroid of K+
    mid = m.vertices[m.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", m.normals, mid - m.centroids[kp]) > 0)
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1.0)
    # boundary normals sum to zero weighted by length (closed boundary)
    s = (m.normals[ni:] * m.face_lengths[ni:, None]).sum(axis=0)
    assert np.allclose(s, 0.0, atol=1e-14)


def test_cells_are_counterclockwise_and_cell_faces_consistent():
    m = build_structured("unit-square", 3)
    p = m.cell_vertices
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    assert np.all(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] > 0)
    for k, cell in enumerate(m.cells):
        for loc in range(3):
            f = m.cell_faces[k, loc]
            assert cell[loc] not in m.faces[f]
            assert k in m.face_cells[f]


def test_orientation_is_fixed_and_order_is_canonical():
    m = build_structured("unit-square", 2)
    flipped = Mesh(m.vertices, m.cells[::-1][:, [0, 2, 1]])
    assert np.array_equal(flipped.cells, m.cells)
    assert np.array_equal(flipped.faces, m.faces)


def test_invalid_meshes():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(MeshError):
        Mesh(v, np.array([[0, 1, 2]]))
    with pytest.raises(MeshError):
        Mesh(v, np.array([[0, 1, 5]]))
    with pytest.raises(MeshError):
        Mesh(v, np.array([[0, 1, 2]]), "bad-tag")


def test_refinement_halves_h_and_preserves_area():
    m = build_structured("l-shape", 2)
    r = refine_uniform(m)
    assert r.n_cells == 4 * m.n_cells
    assert r.h_max == pytest.approx(m.h_max / 2)
    assert r.areas.sum() == pytest.approx(m.areas.sum())
    assert r.quasi_uniformity == pytest.approx(m.quasi_uniformity)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6))
def test_refinement_matches_structured_counts(n):
    r = refine_uniform(build_structured("unit-square", n))
    s = build_structured("unit-square", 2 * n)
    assert (r.n_vertices, r.n_cells, r.n_faces) == (s.n_vertices, s.n_cells, s.n_faces)


def test_export_import_roundtrip(tmp_path):
    m = build_structured("l-shape", 4)
    export_mesh(m, tmp_path / "m.txt")
    back = import_mesh(tmp_path / "m.txt", "l-shape")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.cells, m.cells)
    (tmp_path / "bad.txt").write_text("mesh 2 3 5\n")
    with pytest.raises(MeshError):
        import_mesh(tmp_path / "bad.txt")


def test_face_geometry():
    m = build_structured("unit-square", 2)
    n, h, pts, w = face_geometry(m, 0)
    assert w.sum() == pytest.approx(h)
    assert np.allclose(np.cross(np.append(pts[-1] - pts[0], 0), np.append(n, 0))[:2], 0)
    with pytest.raises(IndexError):
        face_geometry(m, m.n_faces)


def test_stats_keys():
    s = build_structured("unit-square", 2).stats()
    assert s["n_cells"] == 8 and s["n_boundary_faces"] == 8
