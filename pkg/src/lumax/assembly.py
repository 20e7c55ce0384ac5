"""Global dof management, operator assembly, projection, and error norms.

Numbering policy: free dofs are grouped contiguously by quadrature node
(vertex blocks in vertex order, then face blocks in face order).  The lumped
mass matrix is then block-diagonal by construction; off-block entries are
never even stored.

Dirichlet elimination removes both dofs of every boundary edge and every
boundary face.  Interior (bubble-type) dofs are never constrained.
"""

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyIntegrityError, FactorizationError
from .linalg import cg_solve
from .mesh import Mesh
from .refelem import (basis_curl_tensor, basis_value_tensor, gauss_tet_rule,
                      geometry_arrays, get_family, grad_cross_products,
                      lumping_rule)

_CHUNK = 4096


def _coeff_matrix(c):
    """Normalize a scalar or constant SPD 3x3 coefficient to a 3x3 array."""
    arr = np.asarray(c, dtype=float)
    if arr.ndim == 0:
        if arr <= 0.0:
            raise ValueError("coefficient must be positive")
        return float(arr) * np.eye(3)
    if arr.shape != (3, 3):
        raise ValueError("coefficient must be a scalar or a 3x3 matrix")
    if np.abs(arr - arr.T).max() > 1e-14 * max(np.abs(arr).max(), 1.0):
        raise ValueError("coefficient matrix must be symmetric")
    arr = 0.5 * (arr + arr.T)
    try:
        np.linalg.cholesky(arr)
    except np.linalg.LinAlgError:
        raise ValueError("coefficient matrix must be positive definite")
    return arr


class SparseMatrix:
    """Symmetric sparse operator on the free-dof space with a matvec counter."""

    def __init__(self, mat):
        self._csr = mat.tocsr()
        self.n_matvec = 0

    @property
    def shape(self):
        return self._csr.shape

    @property
    def nnz(self):
        return self._csr.nnz

    def matvec(self, x):
        self.n_matvec += 1
        return self._csr @ x

    def __matmul__(self, x):
        return self.matvec(x)

    def __add__(self, other):
        return SparseMatrix(self._csr + other._csr)

    def diagonal(self):
        return self._csr.diagonal()

    def toarray(self):
        return self._csr.toarray()

    def symmetry_defect(self):
        d = self._csr - self._csr.T
        return 0.0 if d.nnz == 0 else float(np.abs(d.data).max())


class BlockDiagMatrix:
    """Block-diagonal SPD operator stored as packed dense node blocks.

    Blocks are grouped by size so factorization and solves run batched.
    Acting on a vector never mixes blocks.
    """

    def __init__(self, sizes, keys, flat=None):
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.keys = list(keys)
        if len(self.keys) != len(self.sizes):
            raise ValueError("one key per block required")
        self.offsets = np.concatenate(([0], np.cumsum(self.sizes)))
        self.flat_offsets = np.concatenate(([0], np.cumsum(self.sizes ** 2)))
        if flat is None:
            flat = np.zeros(self.flat_offsets[-1])
        self.flat = np.asarray(flat, dtype=float)
        if self.flat.shape != (self.flat_offsets[-1],):
            raise ValueError("packed storage has the wrong length")
        self.n_solve = 0
        self._groups = None
        self._factorized = False

    @classmethod
    def from_blocks(cls, blocks, keys=None):
        blocks = [np.asarray(b, dtype=float) for b in blocks]
        if keys is None:
            keys = [("block", i) for i in range(len(blocks))]
        sizes = [b.shape[0] for b in blocks]
        flat = np.concatenate([b.ravel() for b in blocks]) if blocks else None
        return cls(sizes, keys, flat)

    @property
    def n_dim(self):
        return int(self.offsets[-1])

    @property
    def n_blocks(self):
        return len(self.sizes)

    def block(self, b):
        s = self.sizes[b]
        start = self.flat_offsets[b]
        return self.flat[start:start + s * s].reshape(s, s).copy()

    def _build_groups(self):
        groups = []
        for s in np.unique(self.sizes):
            sel = np.flatnonzero(self.sizes == s)
            dof_idx = self.offsets[sel][:, None] + np.arange(s)
            mat_idx = self.flat_offsets[sel][:, None] + np.arange(s * s)
            mats = self.flat[mat_idx].reshape(-1, s, s)
            groups.append({"size": int(s), "sel": sel, "dof_idx": dof_idx,
                           "mats": mats, "inv": None})
        self._groups = groups

    def factorize(self):
        """Validate every block SPD (batched Cholesky) and cache inverses."""
        self._build_groups()
        for g in self._groups:
            try:
                np.linalg.cholesky(g["mats"])
            except np.linalg.LinAlgError:
                for b in g["sel"]:
                    try:
                        np.linalg.cholesky(self.block(b))
                    except np.linalg.LinAlgError:
                        raise FactorizationError(
                            "block is not symmetric positive definite",
                            node=self.keys[b])
                raise FactorizationError("batched factorization failed")
            g["inv"] = np.linalg.inv(g["mats"])
        self._factorized = True

    def solve(self, r):
        if not self._factorized:
            self.factorize()
        self.n_solve += 1
        r = np.asarray(r, dtype=float)
        out = np.empty_like(r)
        for g in self._groups:
            out[g["dof_idx"]] = np.einsum("kij,kj->ki", g["inv"], r[g["dof_idx"]])
        return out

    def apply(self, x):
        if self._groups is None:
            self._build_groups()
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for g in self._groups:
            out[g["dof_idx"]] = np.einsum("kij,kj->ki", g["mats"], x[g["dof_idx"]])
        return out

    def matvec(self, x):
        return self.apply(x)

    def diagonal(self):
        d = np.empty(self.n_dim)
        if self._groups is None:
            self._build_groups()
        for g in self._groups:
            d[g["dof_idx"]] = np.einsum("kii->ki", g["mats"])
        return d

    def toarray(self):
        a = np.zeros((self.n_dim, self.n_dim))
        for b in range(self.n_blocks):
            lo, hi = self.offsets[b], self.offsets[b + 1]
            a[lo:hi, lo:hi] = self.block(b)
        return a


class DofMap:
    """Free-dof numbering for one basis family on one mesh.

    Attributes:
        family: BasisFamily instance.
        gdof: (T, local_dim) global free index per local slot, -1 if eliminated.
        edge_dofs / face_dofs / interior_dofs: per-entity global indices
            (-1 where constrained; interior_dofs is None for N1).
        block_keys: ('v', vertex) or ('f', face) per node block, in numbering
            order.
        block_sizes / block_offsets: block partition of the free index range.
        dof_block / dof_pos: block id and in-block position per free dof.
    """

    def __init__(self, family, gdof, edge_dofs, face_dofs, interior_dofs,
                 block_keys, block_sizes, n_total):
        self.family = family
        self.gdof = gdof
        self.edge_dofs = edge_dofs
        self.face_dofs = face_dofs
        self.interior_dofs = interior_dofs
        self.block_keys = block_keys
        self.block_sizes = np.asarray(block_sizes, dtype=np.int64)
        self.block_offsets = np.concatenate(([0], np.cumsum(self.block_sizes)))
        self.n_total = int(n_total)
        self.n_free = int(self.block_offsets[-1])
        self.dof_block = np.repeat(np.arange(len(self.block_sizes)),
                                   self.block_sizes)
        self.dof_pos = np.arange(self.n_free) - self.block_offsets[self.dof_block]

    @property
    def tag(self):
        return self.family.tag

    @property
    def n_constrained(self):
        return self.n_total - self.n_free

    @property
    def n_blocks(self):
        return len(self.block_sizes)

    def node_blocks(self):
        """Yield (key, free-dof index array) per node block."""
        for b in range(self.n_blocks):
            lo, hi = self.block_offsets[b], self.block_offsets[b + 1]
            yield self.block_keys[b], np.arange(lo, hi)


def build_dof_map(mesh, family, constrain=True):
    if isinstance(family, str):
        family = get_family(family)
    has_interior = any(kind == "interior" for kind, *_ in family.dof_descriptors)
    edges = mesh.edges
    if constrain:
        edge_free = ~mesh.boundary_edge
        face_free = ~mesh.boundary_face
    else:
        edge_free = np.ones(mesh.n_edges, dtype=bool)
        face_free = np.ones(mesh.n_faces, dtype=bool)
    n_adj = (mesh.face_to_tets >= 0).sum(axis=1)

    # Block sizes per candidate node: vertices first, then faces.
    vertex_sizes = np.bincount(
        np.concatenate([edges[edge_free, 0], edges[edge_free, 1]]),
        minlength=mesh.n_vertices)
    face_sizes = 2 * face_free.astype(np.int64)
    if has_interior:
        face_sizes = face_sizes + n_adj
    all_sizes = np.concatenate([vertex_sizes, face_sizes])
    node_start = np.concatenate(([0], np.cumsum(all_sizes)))

    occupied = np.flatnonzero(all_sizes > 0)
    block_keys = [("v", int(i)) if i < mesh.n_vertices
                  else ("f", int(i - mesh.n_vertices)) for i in occupied]
    block_sizes = all_sizes[occupied]

    # Edge dofs: dof (a->b) lives in the block of its tail vertex.  Within a
    # vertex block, dofs are ordered by edge index.
    edge_dofs = np.full((mesh.n_edges, 2), -1, dtype=np.int64)
    fe = np.flatnonzero(edge_free)
    tail = np.concatenate([edges[fe, 0], edges[fe, 1]])
    which = np.repeat([0, 1], len(fe))
    eid = np.concatenate([fe, fe])
    order = np.lexsort((eid, tail))
    tail_s, eid_s, which_s = tail[order], eid[order], which[order]
    pos_in_block = np.arange(len(tail_s)) - np.searchsorted(tail_s, tail_s)
    edge_dofs[eid_s, which_s] = node_start[tail_s] + pos_in_block

    # Face dofs: the two tangential dofs of an interior face open its block.
    face_dofs = np.full((mesh.n_faces, 2), -1, dtype=np.int64)
    ff = np.flatnonzero(face_free)
    face_dofs[ff, 0] = node_start[mesh.n_vertices + ff]
    face_dofs[ff, 1] = face_dofs[ff, 0] + 1

    # Interior dofs: appended to the owning face block, adjacent tets in
    # ascending order (face_to_tets rows are stored ascending).
    interior_dofs = None
    if has_interior:
        interior_dofs = np.empty((mesh.n_tets, 4), dtype=np.int64)
        for local_face in range(4):
            fid = mesh.tet_to_faces[:, local_face]
            rank = (mesh.face_to_tets[fid, 0] != np.arange(mesh.n_tets)).astype(np.int64)
            interior_dofs[:, local_face] = (node_start[mesh.n_vertices + fid]
                                            + 2 * face_free[fid] + rank)

    # Per (tet, local slot) global index, straight from the descriptor list.
    # Tet vertices are stored ascending, so local lo/hi orientation matches
    # the global edge orientation and sorted face triples match globally.
    gdof = np.empty((mesh.n_tets, family.local_dim), dtype=np.int64)
    for col, desc in enumerate(family.dof_descriptors):
        kind = desc[0]
        if kind == "edge":
            _, slot, w = desc
            gdof[:, col] = edge_dofs[mesh.tet_to_edges[:, slot], w]
        elif kind == "face":
            _, f, w = desc
            gdof[:, col] = face_dofs[mesh.tet_to_faces[:, f], w]
        else:
            _, f = desc
            gdof[:, col] = interior_dofs[:, f]

    n_total = 2 * mesh.n_edges + 2 * mesh.n_faces
    if has_interior:
        n_total += 4 * mesh.n_tets
    return DofMap(family, gdof, edge_dofs, face_dofs, interior_dofs,
                  block_keys, block_sizes, n_total)


def assemble_lumped_mass(mesh, dofmap, eps=1.0):
    """Lumped mass via the 8-node rule, scattered straight into node blocks.

    Only same-node dof pairs are ever accumulated, so off-block entries are
    zero by construction, not by cancellation.
    """
    family = dofmap.family
    if not family.lumped:
        raise ValueError(f"family {family.tag} has no lumped basis")
    grads, vols = geometry_arrays(mesh)
    rule = lumping_rule()
    v8 = basis_value_tensor(family, rule.nodes)
    slots = family.node_slots()
    eps3 = _coeff_matrix(eps)

    flat_off = np.concatenate(([0], np.cumsum(dofmap.block_sizes ** 2)))
    flat = np.zeros(flat_off[-1])
    big = np.iinfo(np.int64).max
    for q in range(len(rule.nodes)):
        s = np.asarray(slots[q], dtype=np.int64)
        val = np.einsum("sm,tmd->tsd", v8[q, s], grads)
        loc = np.einsum("tsd,de,tre->tsr", val, eps3, val, optimize=True)
        loc = 0.5 * (loc + loc.transpose(0, 2, 1))
        loc *= (rule.weights[q] * vols)[:, None, None]

        g = dofmap.gdof[:, s]
        free = g >= 0
        gs = np.where(free, g, 0)
        blk = np.where(free, dofmap.dof_block[gs], -1)
        bmax = blk.max(axis=1)
        bmin = np.where(free, blk, big).min(axis=1)
        bad = (bmax >= 0) & (bmin != bmax)
        if bad.any():
            t = int(np.flatnonzero(bad)[0])
            raise AssemblyIntegrityError(
                "dofs sharing a quadrature node map to different blocks",
                node=(t, q))
        pos = np.where(free, dofmap.dof_pos[gs], 0)
        base = np.where(bmax >= 0, flat_off[np.maximum(bmax, 0)], 0)
        size = np.where(bmax >= 0, dofmap.block_sizes[np.maximum(bmax, 0)], 1)
        pair = free[:, :, None] & free[:, None, :]
        idx = (base[:, None, None] + pos[:, :, None] * size[:, None, None]
               + pos[:, None, :])
        np.add.at(flat, idx[pair], loc[pair])

    mt = BlockDiagMatrix(dofmap.block_sizes, dofmap.block_keys, flat)
    try:
        mt.factorize()
    except FactorizationError as exc:
        raise AssemblyIntegrityError(
            f"lumped mass block is not SPD: {exc}", node=exc.node)
    return mt


_MASS_TENSOR = {}
_STIFF_TENSOR = {}


def _mass_tensor(family):
    key = (family.tag, family.lumped)
    if key not in _MASS_TENSOR:
        rule = gauss_tet_rule()
        v = basis_value_tensor(family, rule.nodes)
        c = np.einsum("q,qim,qjn->mnij", rule.weights, v, v, optimize=True)
        ld = family.local_dim
        _MASS_TENSOR[key] = np.ascontiguousarray(c.reshape(16, ld * ld))
    return _MASS_TENSOR[key]


def _stiff_tensor(family):
    key = (family.tag, family.lumped)
    if key not in _STIFF_TENSOR:
        rule = gauss_tet_rule()
        ct = basis_curl_tensor(family, rule.nodes)
        d = np.einsum("q,qia,qjb->abij", rule.weights, ct, ct, optimize=True)
        ld = family.local_dim
        _STIFF_TENSOR[key] = np.ascontiguousarray(d.reshape(256, ld * ld))
    return _STIFF_TENSOR[key]


def _scatter_symmetric(local_chunks, dofmap):
    """Accumulate symmetric element matrices into a CSR matrix.

    Each local matrix is symmetrized, only pairs with row <= col are stored,
    and the strict upper triangle is mirrored, so the result is exactly
    symmetric entry for entry.
    """
    n = dofmap.n_free
    rows, cols, vals = [], [], []
    for loc, g in local_chunks:
        loc = 0.5 * (loc + loc.transpose(0, 2, 1))
        gi = np.broadcast_to(g[:, :, None], loc.shape)
        gj = np.broadcast_to(g[:, None, :], loc.shape)
        keep = (gi >= 0) & (gj >= 0) & (gi <= gj)
        rows.append(gi[keep])
        cols.append(gj[keep])
        vals.append(loc[keep])
    u = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    return SparseMatrix(u + sp.triu(u, 1).T)


def assemble_consistent_mass(mesh, dofmap, eps=1.0):
    family = dofmap.family
    eps3 = _coeff_matrix(eps)
    grads, vols = geometry_arrays(mesh)
    c2 = _mass_tensor(family)
    ld = family.local_dim

    def chunks():
        for lo in range(0, mesh.n_tets, _CHUNK):
            hi = min(lo + _CHUNK, mesh.n_tets)
            g2 = np.einsum("tmd,de,tne->tmn", grads[lo:hi], eps3, grads[lo:hi],
                           optimize=True).reshape(hi - lo, 16)
            loc = (g2 @ c2).reshape(hi - lo, ld, ld)
            loc *= vols[lo:hi, None, None]
            yield loc, dofmap.gdof[lo:hi]

    return _scatter_symmetric(chunks(), dofmap)


def assemble_stiffness(mesh, dofmap, mu_inv=1.0):
    family = dofmap.family
    mu3 = _coeff_matrix(mu_inv)
    grads, vols = geometry_arrays(mesh)
    d2 = _stiff_tensor(family)
    ld = family.local_dim

    def chunks():
        for lo in range(0, mesh.n_tets, _CHUNK):
            hi = min(lo + _CHUNK, mesh.n_tets)
            cross = grad_cross_products(grads[lo:hi]).reshape(hi - lo, 16, 3)
            h2 = np.einsum("tad,de,tbe->tab", cross, mu3, cross,
                           optimize=True).reshape(hi - lo, 256)
            loc = (h2 @ d2).reshape(hi - lo, ld, ld)
            loc *= vols[lo:hi, None, None]
            yield loc, dofmap.gdof[lo:hi]

    return _scatter_symmetric(chunks(), dofmap)


def assemble_field_products(mesh, dofmap, field=None, curl_field=None):
    """Vector of (field, Phi_j) + (curl_field, curl Phi_j) over free dofs.

    Either evaluator may be None; both take an (N, 3) point array and return
    (N, 3) values.  Integration uses the degree-validated volume rule.
    """
    family = dofmap.family
    grads, vols = geometry_arrays(mesh)
    rule = gauss_tet_rule()
    w = rule.weights
    v = basis_value_tensor(family, rule.nodes) if field is not None else None
    ct = basis_curl_tensor(family, rule.nodes) if curl_field is not None else None
    out = np.zeros(dofmap.n_free)
    corner = mesh.vertices[mesh.tets]
    for lo in range(0, mesh.n_tets, _CHUNK):
        hi = min(lo + _CHUNK, mesh.n_tets)
        nt = hi - lo
        pts = np.einsum("qm,tmd->tqd", rule.nodes, corner[lo:hi])
        loc = np.zeros((nt, family.local_dim))
        if field is not None:
            f = np.asarray(field(pts.reshape(-1, 3)), dtype=float)
            f = f.reshape(nt, len(w), 3)
            fg = np.einsum("tqd,tmd->tqm", f, grads[lo:hi])
            loc += np.einsum("q,tqm,qim->ti", w, fg, v, optimize=True)
        if curl_field is not None:
            cf = np.asarray(curl_field(pts.reshape(-1, 3)), dtype=float)
            cf = cf.reshape(nt, len(w), 3)
            cross = grad_cross_products(grads[lo:hi]).reshape(nt, 16, 3)
            ca = np.einsum("tqd,tad->tqa", cf, cross)
            loc += np.einsum("q,tqa,qia->ti", w, ca, ct, optimize=True)
        loc *= vols[lo:hi, None]
        g = dofmap.gdof[lo:hi]
        keep = g >= 0
        np.add.at(out, g[keep], loc[keep])
    return out


def assemble_load(mesh, dofmap, case, t):
    """Right-hand side (dttE + E itself enters through the weak form):
    load_j = (dtt E(t), Phi_j) + (curl E(t), curl Phi_j)."""
    return assemble_field_products(
        mesh, dofmap,
        field=lambda x: case.dtt_e(x, t),
        curl_field=lambda x: case.curl_e(x, t))


def elliptic_projection(mesh, dofmap, case, t, tol=1e-10, mass=None,
                        stiffness=None, x0=None):
    """Coefficients of the (M + K)-projection of the case solution at time t."""
    if mass is None:
        mass = assemble_consistent_mass(mesh, dofmap)
    if stiffness is None:
        stiffness = assemble_stiffness(mesh, dofmap)
    rhs = assemble_field_products(
        mesh, dofmap,
        field=lambda x: case.e(x, t),
        curl_field=lambda x: case.curl_e(x, t))
    a = mass + stiffness
    return cg_solve(a, rhs, tol=tol, x0=x0, precond_diag=a.diagonal())


def error_norms(e_diff, mesh, dofmap, mass=None, stiffness=None):
    """(sqrt(e'Me), sqrt(e'Ke)) with consistent unit-coefficient M and K."""
    if mass is None:
        mass = assemble_consistent_mass(mesh, dofmap)
    if stiffness is None:
        stiffness = assemble_stiffness(mesh, dofmap)
    e = np.asarray(e_diff, dtype=float)
    l2 = np.sqrt(max(float(e @ mass.matvec(e)), 0.0))
    curl = np.sqrt(max(float(e @ stiffness.matvec(e)), 0.0))
    return l2, curl
