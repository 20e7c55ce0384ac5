import math

import numpy as np
import pytest

from lumax.errors import DegenerateElementError, MeshParseError, NonManifoldError
from lumax.mesh import (LOCAL_EDGES, LOCAL_FACES, build_cube_mesh,
                        extract_topology, mesh_io, parse_mesh, serialize_mesh)

REF_VERTS = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def test_single_tet_topology():
    mesh = extract_topology(REF_VERTS, np.array([[0, 1, 2, 3]]))
    assert mesh.n_edges == 6
    assert mesh.n_faces == 4
    assert mesh.boundary_face.all()
    assert mesh.boundary_edge.all()
    assert mesh.volumes[0] == pytest.approx(1.0 / 6.0)


def test_local_connectivity_tables():
    assert len(LOCAL_EDGES) == 6 and len(LOCAL_FACES) == 4
    assert all(a < b for a, b in LOCAL_EDGES)
    assert all(a < b < c for a, b, c in LOCAL_FACES)
    # local face f is the one opposite local vertex f
    for f, tri in enumerate(LOCAL_FACES):
        assert f not in tri


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_cube_mesh_counts(n):
    mesh = build_cube_mesh(n)
    assert mesh.n_vertices == (n + 1) ** 3
    assert mesh.n_tets == 6 * n ** 3
    assert int(mesh.boundary_face.sum()) == 12 * n ** 2
    assert int(mesh.boundary_edge.sum()) == 18 * n ** 2
    euler = mesh.n_vertices - mesh.n_edges + mesh.n_faces - mesh.n_tets
    assert euler == 1
    assert mesh.volumes.sum() == pytest.approx(1.0, abs=1e-12)
    assert (mesh.volumes > 0).all()
    assert mesh.stats().h_max == pytest.approx(math.sqrt(3) / n, abs=1e-12)


def test_cube_mesh_n1_interior_entities():
    mesh = build_cube_mesh(1)
    assert int((~mesh.boundary_edge).sum()) == 1
    assert int((~mesh.boundary_face).sum()) == 6
    inner = mesh.edges[~mesh.boundary_edge][0]
    d = mesh.vertices[inner[1]] - mesh.vertices[inner[0]]
    assert np.linalg.norm(d) == pytest.approx(math.sqrt(3))


def test_tets_sorted_and_face_map_consistent():
    mesh = build_cube_mesh(2)
    assert (np.diff(mesh.tets, axis=1) > 0).all()
    two = mesh.face_to_tets
    interior = ~mesh.boundary_face
    assert (two[interior, 0] < two[interior, 1]).all()
    assert (two[mesh.boundary_face, 1] == -1).all()
    # each tet sees each of its faces through tet_to_faces
    for t in range(0, mesh.n_tets, 7):
        for f in range(4):
            fid = mesh.tet_to_faces[t, f]
            assert t in mesh.face_to_tets[fid]


def test_degenerate_tet_rejected():
    flat = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(DegenerateElementError):
        extract_topology(flat, np.array([[0, 1, 2, 3]]))


def test_non_manifold_face_rejected():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [0, 0, 1], [0, 0, -1], [1, 1, 1]])
    tets = np.array([[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])
    with pytest.raises(NonManifoldError):
        extract_topology(verts, tets)


def test_serialize_parse_roundtrip():
    mesh = build_cube_mesh(2)
    back = parse_mesh(serialize_mesh(mesh))
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.tets, mesh.tets)
    assert np.array_equal(back.boundary_face, mesh.boundary_face)


def test_mesh_io_dispatches_both_ways():
    mesh = build_cube_mesh(1)
    text = mesh_io(mesh)
    assert isinstance(text, str)
    back = mesh_io(text)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.tets, mesh.tets)


@pytest.mark.parametrize("text,line", [
    ("not numbers\n", 1),
    ("2 1\n0 0 0\n", 2),
    ("4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 9\n", 6),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(MeshParseError) as err:
        parse_mesh(text)
    assert err.value.line == line


def test_build_cube_mesh_validates_n():
    with pytest.raises(ValueError):
        build_cube_mesh(0)
