"""Tetrahedral meshes of the unit cube with edge/face topology.

Meshes are built by Kuhn subdivision (each subcube split into 6 tetrahedra
sharing the body diagonal) or loaded from a small ASCII format.  Every tet
stores its vertices in ascending global order, so barycentric functions
attached to shared edges and faces agree between neighbouring elements and
no orientation bookkeeping is needed downstream.
"""

import itertools

import numpy as np

from .errors import DegenerateElementError, MeshParseError, NonManifoldError

# local sub-entity numbering used by every module:
# edge slot e -> vertex pair LOCAL_EDGES[e]; face slot f is opposite vertex f
LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
LOCAL_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


class Mesh:
    """Immutable tetrahedral mesh with derived edge/face topology.

    Attributes:
        vertices: (V, 3) float array.
        tets: (T, 4) int array, each row strictly ascending.
        edges: (E, 2) int array of sorted vertex pairs.
        faces: (F, 3) int array of sorted vertex triples.
        tet_to_edges: (T, 6) edge index per local edge slot.
        tet_to_faces: (T, 4) face index per local face slot.
        face_to_tets: (F, 2) incident tets, second entry -1 on the boundary.
        boundary_face, boundary_edge: boolean flags.
        volumes: (T,) positive tet volumes.
    """

    def __init__(self, vertices, tets, edges, faces, tet_to_edges, tet_to_faces,
                 face_to_tets, boundary_face, boundary_edge, volumes):
        self.vertices = vertices
        self.tets = tets
        self.edges = edges
        self.faces = faces
        self.tet_to_edges = tet_to_edges
        self.tet_to_faces = tet_to_faces
        self.face_to_tets = face_to_tets
        self.boundary_face = boundary_face
        self.boundary_edge = boundary_edge
        self.volumes = volumes
        for arr in (vertices, tets, edges, faces, tet_to_edges, tet_to_faces,
                    face_to_tets, boundary_face, boundary_edge, volumes):
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def stats(self):
        return MeshStats(
            h_max=float(self.edge_lengths().max()),
            n_vertices=self.n_vertices,
            n_edges=self.n_edges,
            n_faces=self.n_faces,
            n_tets=self.n_tets,
        )

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.tets, other.tets))

    def __repr__(self):
        return (f"Mesh(V={self.n_vertices}, E={self.n_edges}, "
                f"F={self.n_faces}, T={self.n_tets})")


class MeshStats:
    def __init__(self, h_max, n_vertices, n_edges, n_faces, n_tets):
        self.h_max = h_max
        self.n_vertices = n_vertices
        self.n_edges = n_edges
        self.n_faces = n_faces
        self.n_tets = n_tets

    def __repr__(self):
        return (f"MeshStats(h_max={self.h_max:.6g}, V={self.n_vertices}, "
                f"E={self.n_edges}, F={self.n_faces}, T={self.n_tets})")


def _tet_volumes(vertices, tets):
    p = vertices[tets]
    d = p[:, 1:] - p[:, :1]
    return np.abs(np.linalg.det(d)) / 6.0


def extract_topology(vertices, tets):
    """Derive edges, faces, incidence, and boundary flags from raw connectivity.

    Tets are re-sorted into ascending vertex order.  A face incident to one
    tet is boundary; an edge is boundary iff it lies in some boundary face.

    Raises:
        ValueError: invalid vertex references or duplicate tets.
        NonManifoldError: a face shared by more than two tets.
        DegenerateElementError: a tet with zero volume.
    """
    vertices = np.ascontiguousarray(vertices, dtype=float)
    tets = np.asarray(tets, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValueError("vertices must have shape (V, 3)")
    if tets.ndim != 2 or tets.shape[1] != 4:
        raise ValueError("tets must have shape (T, 4)")
    nv = vertices.shape[0]
    if tets.size and (tets.min() < 0 or tets.max() >= nv):
        raise ValueError("tet references a vertex index out of range")
    tets = np.sort(tets, axis=1)
    if np.any(np.diff(tets, axis=1) == 0):
        raise ValueError("tet with repeated vertex index")
    uniq = np.unique(tets, axis=0)
    if uniq.shape[0] != tets.shape[0]:
        raise ValueError("duplicate tets in connectivity")

    volumes = _tet_volumes(vertices, tets)
    if np.any(volumes <= 0.0):
        bad = int(np.argmin(volumes))
        raise DegenerateElementError(f"tet {bad} has zero volume")

    pair = np.array(LOCAL_EDGES)
    all_edges = tets[:, pair].reshape(-1, 2)
    edges, edge_inv = np.unique(all_edges, axis=0, return_inverse=True)
    tet_to_edges = edge_inv.reshape(-1, 6)

    tri = np.array(LOCAL_FACES)
    all_faces = tets[:, tri].reshape(-1, 3)
    faces, face_inv = np.unique(all_faces, axis=0, return_inverse=True)
    tet_to_faces = face_inv.reshape(-1, 4)

    nf = faces.shape[0]
    counts = np.bincount(face_inv, minlength=nf)
    if np.any(counts > 2):
        bad = int(np.argmax(counts))
        raise NonManifoldError(f"face {tuple(faces[bad])} shared by {counts[bad]} tets")
    boundary_face = counts == 1

    face_to_tets = np.full((nf, 2), -1, dtype=np.int64)
    order = np.argsort(face_inv, kind="stable")
    owner_tet = order // 4
    slot = np.zeros(len(order), dtype=np.int64)
    sorted_faces = face_inv[order]
    slot[1:] = sorted_faces[1:] == sorted_faces[:-1]
    face_to_tets[sorted_faces, slot] = owner_tet

    # an edge is boundary iff contained in a boundary face
    edge_key = edges[:, 0] * np.int64(nv) + edges[:, 1]
    bt = faces[boundary_face]
    be = np.concatenate([bt[:, [0, 1]], bt[:, [0, 2]], bt[:, [1, 2]]], axis=0)
    be_key = np.unique(be[:, 0] * np.int64(nv) + be[:, 1])
    boundary_edge = np.isin(edge_key, be_key, assume_unique=False)

    return Mesh(vertices, tets, edges, faces, tet_to_edges, tet_to_faces,
                face_to_tets, boundary_face, boundary_edge, volumes)


def build_cube_mesh(n):
    """Kuhn subdivision of the unit cube: n^3 subcubes, 6 tets each.

    Each subcube is cut into the 6 tetrahedra spanned by the monotone lattice
    paths from its low corner to its high corner, so all tets share the
    subcube body diagonal and neighbouring subcubes match up conformingly.

    Args:
        n: subdivisions per axis, n >= 1.

    Returns:
        Mesh with (n+1)^3 vertices and 6 n^3 tets.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("n must be a positive integer")
    n = int(n)
    m = n + 1
    g = np.arange(m)
    ii, jj, kk = np.meshgrid(g, g, g, indexing="ij")
    vertices = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) / float(n)

    def vid(i, j, k):
        return (i * m + j) * m + k

    base = np.arange(n)
    bi, bj, bk = np.meshgrid(base, base, base, indexing="ij")
    corner = np.stack([bi.ravel(), bj.ravel(), bk.ravel()], axis=1)

    axes = np.eye(3, dtype=np.int64)
    tets = []
    for perm in itertools.permutations(range(3)):
        p0 = corner
        p1 = p0 + axes[perm[0]]
        p2 = p1 + axes[perm[1]]
        p3 = p2 + axes[perm[2]]
        quad = np.stack([p0, p1, p2, p3], axis=1)
        tets.append(vid(quad[..., 0], quad[..., 1], quad[..., 2]))
    tets = np.concatenate(tets, axis=0)
    return extract_topology(vertices, tets)


def serialize_mesh(mesh):
    """Write a mesh as ASCII text: header 'V T', vertex lines, tet lines."""
    lines = [f"{mesh.n_vertices} {mesh.n_tets}"]
    for x, y, z in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} {z:.17g}")
    for t in mesh.tets:
        lines.append(f"{t[0]} {t[1]} {t[2]} {t[3]}")
    return "\n".join(lines) + "\n"


def parse_mesh(text):
    """Parse the ASCII mesh format; '#' starts a comment.

    Raises:
        MeshParseError: wrong token count, bad number, or index out of range,
            reported with the 1-based source line number.
    """
    tokens = []   # (line_no, token) with comments stripped
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        for tok in body.split():
            tokens.append((lineno, tok))
    pos = 0

    def take(count, kind, what):
        nonlocal pos
        if pos + count > len(tokens):
            last = tokens[-1][0] if tokens else 1
            raise MeshParseError(f"unexpected end of file while reading {what}", line=last)
        out = []
        for _ in range(count):
            lineno, tok = tokens[pos]
            pos += 1
            try:
                out.append(kind(tok))
            except ValueError:
                raise MeshParseError(f"bad {what} token {tok!r}", line=lineno) from None
        return out, tokens[pos - 1][0]

    (nv, nt), _ = take(2, int, "header count")
    if nv < 0 or nt < 0:
        raise MeshParseError("negative count in header", line=tokens[0][0])
    vertices = np.empty((nv, 3))
    for i in range(nv):
        row, _ = take(3, float, "coordinate")
        vertices[i] = row
    tets = np.empty((nt, 4), dtype=np.int64)
    for i in range(nt):
        row, lineno = take(4, int, "vertex index")
        for v in row:
            if v < 0 or v >= nv:
                raise MeshParseError(f"vertex index {v} out of range [0, {nv})", line=lineno)
        tets[i] = row
    if pos != len(tokens):
        raise MeshParseError("trailing tokens after mesh data", line=tokens[pos][0])
    return extract_topology(vertices, tets)


def mesh_io(obj):
    """Serialize a Mesh to text or parse text back to a Mesh."""
    if isinstance(obj, Mesh):
        return serialize_mesh(obj)
    return parse_mesh(obj)
