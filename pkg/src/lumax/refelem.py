"""Reference-element geometry, quadrature, and the three basis families.

Basis functions are stored symbolically as sums of terms
``coef * lambda^expo * grad(lambda_m)`` with barycentric exponent tuples, so
values, curls, and integrals can be evaluated exactly and uniformly for every
family.  The vertex/face-midpoint rule drives mass lumping: in the modified
(hatted) basis each local function survives at exactly one of its 8 nodes.

Local dof layout (0-based), shared with the assembly module:
    0..11   edge functions, two per edge, pairs (lo->hi, hi->lo)
    12..19  face functions, two per face, faces ordered opposite vertex 0..3
    20..23  interior functions, one per face (EJ1/MEJ1 only)
"""

import math

import numpy as np

from .errors import DegenerateElementError
from .mesh import LOCAL_EDGES, LOCAL_FACES

# -----------------------------------------------------------------------------
# geometry

class ElementGeometry:
    """Barycentric data of one tetrahedron: gradients and volume."""

    def __init__(self, vertex_coords, grad_lambda, volume):
        self.vertex_coords = vertex_coords
        self.grad_lambda = grad_lambda
        self.volume = volume


def element_geometry(vertex_coords):
    """Compute barycentric gradients and volume for four non-coplanar points.

    Raises:
        DegenerateElementError: volume below 1e-14 times the element scale cubed.
    """
    v = np.asarray(vertex_coords, dtype=float)
    if v.shape != (4, 3):
        raise ValueError("vertex_coords must have shape (4, 3)")
    d = v[1:] - v[0]                       # rows span the element
    det = np.linalg.det(d)
    scale = max(np.linalg.norm(v[i] - v[j]) for i in range(4) for j in range(i))
    if abs(det) / 6.0 < 1e-14 * scale ** 3:
        raise DegenerateElementError("tetrahedron is (near) degenerate")
    grad = np.empty((4, 3))
    grad[1:] = np.linalg.inv(d).T          # rows = grads of lambda_2..4
    grad[0] = -grad[1:].sum(axis=0)        # partition of unity
    return ElementGeometry(v, grad, abs(det) / 6.0)


def geometry_arrays(mesh):
    """Vectorized grad_lambda (T,4,3) and volumes (T,) for a whole mesh."""
    p = mesh.vertices[mesh.tets]
    d = p[:, 1:] - p[:, :1]
    grads = np.empty((mesh.n_tets, 4, 3))
    grads[:, 1:] = np.transpose(np.linalg.inv(d), (0, 2, 1))
    grads[:, 0] = -grads[:, 1:].sum(axis=1)
    return grads, mesh.volumes.astype(float)


# -----------------------------------------------------------------------------
# quadrature

class QuadratureRule:
    """Barycentric nodes and weights relative to the element volume."""

    def __init__(self, nodes, weights):
        nodes = np.asarray(nodes, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if nodes.shape[0] != weights.shape[0] or nodes.shape[1] != 4:
            raise ValueError("nodes (Q,4) and weights (Q,) must match")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        self.nodes = nodes
        self.weights = weights


def lumping_rule():
    """The 8-point rule: weight 1/40 at vertices, 9/40 at face midpoints.

    Exact for polynomials of degree <= 3.  Face midpoints are the barycenters
    of the faces, i.e. the points with one barycentric coordinate zero and the
    other three equal to 1/3.
    """
    nodes = np.vstack([np.eye(4), (1.0 - np.eye(4)) / 3.0])
    weights = np.array([1 / 40] * 4 + [9 / 40] * 4, dtype=float)
    return QuadratureRule(nodes, weights)


def gauss_tet_rule(points_per_axis=6):
    """Collapsed tensor Gauss rule on the tetrahedron (Duffy transform).

    With p points per axis the rule integrates barycentric polynomials of
    total degree <= 2p - 3 exactly (the transform adds degree 2 in the first
    axis).  The default p=6 covers the degree-8 products arising from the
    quartic MEJ1 interior function; correctness is established against
    exact_monomial_integral in the test suite, not assumed.
    """
    x, w = np.polynomial.legendre.leggauss(points_per_axis)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v, t = np.meshgrid(x, x, x, indexing="ij")
    wu, wv, wt = np.meshgrid(w, w, w, indexing="ij")
    u, v, t = u.ravel(), v.ravel(), t.ravel()
    jac = (1.0 - u) ** 2 * (1.0 - v)
    weights = 6.0 * (wu * wv * wt).ravel() * jac
    xx = u
    yy = v * (1.0 - u)
    zz = t * (1.0 - u) * (1.0 - v)
    lam = np.stack([1.0 - xx - yy - zz, xx, yy, zz], axis=1)
    return QuadratureRule(lam, weights)


def quadrature_integrate(geom, f, rule=None):
    """Integrate a point function over the element with a barycentric rule.

    Defaults to the 8-point lumping rule.  ``f`` is evaluated at the physical
    node positions; scalar or componentwise array results are supported.
    """
    if rule is None:
        rule = lumping_rule()
    pts = rule.nodes @ geom.vertex_coords
    vals = np.array([f(p) for p in pts], dtype=float)
    return geom.volume * np.tensordot(rule.weights, vals, axes=(0, 0))


def exact_monomial_integral(exponents, volume):
    """Exact integral of a barycentric monomial over one element.

    integral lam1^a lam2^b lam3^c lam4^d = |K| a! b! c! d! 3! / (a+b+c+d+3)!
    Computed with exact integer arithmetic, so no overflow for any practical
    degree.
    """
    a, b, c, d = exponents
    for e in (a, b, c, d):
        if e < 0 or int(e) != e:
            raise ValueError("exponents must be nonnegative integers")
    a, b, c, d = int(a), int(b), int(c), int(d)
    num = 6 * math.factorial(a) * math.factorial(b) * math.factorial(c) * math.factorial(d)
    den = math.factorial(a + b + c + d + 3)
    return volume * (num / den)


# -----------------------------------------------------------------------------
# symbolic barycentric terms: (coef, expo 4-tuple, grad index)

def _combine(terms):
    acc = {}
    for c, e, m in terms:
        key = (e, m)
        acc[key] = acc.get(key, 0.0) + c
    return tuple((c, e, m) for (e, m), c in acc.items() if c != 0.0)


def _scaled(terms, s):
    return tuple((s * c, e, m) for c, e, m in terms)


def _expo(*pairs):
    e = [0, 0, 0, 0]
    for idx, p in pairs:
        e[idx] += p
    return tuple(e)


def _edge_functions():
    fns = []
    for lo, hi in LOCAL_EDGES:
        fns.append(((1.0, _expo((lo, 1)), hi),))   # lambda_lo grad lambda_hi
        fns.append(((1.0, _expo((hi, 1)), lo),))   # lambda_hi grad lambda_lo
    return fns


def _face_functions():
    # for sorted face (i, j, k): first lam_j (lam_i grad lam_k - lam_k grad lam_i),
    # second lam_k (lam_i grad lam_j - lam_j grad lam_i)
    fns = []
    for i, j, k in LOCAL_FACES:
        fns.append(((1.0, _expo((j, 1), (i, 1)), k), (-1.0, _expo((j, 1), (k, 1)), i)))
        fns.append(((1.0, _expo((k, 1), (i, 1)), j), (-1.0, _expo((k, 1), (j, 1)), i)))
    return fns


def _interior_functions(tag):
    # w_l = product of the other three barycentrics times grad lambda_l
    fns = []
    for ell in range(4):
        e = [1, 1, 1, 1]
        e[ell] = 0
        fns.append(((1.0, tuple(e), ell),))
    if tag == "MEJ1":
        # quartic replacement for the fourth function: restores independence
        # of the four curls while keeping the same nodal values
        fns[3] = ((1.0, (1, 1, 1, 0), 3), (1.0, (1, 2, 1, 0), 3), (-1.0, (2, 1, 1, 0), 3))
    return fns


# coefficient matrix for the face corrections: hatted face j picks up
# interior functions so that it vanishes at all nodes but its own
A_COEF = np.array([
    [0, 0, 3, 3, 3, 3, 3, 3],
    [3, 3, 0, 0, 0, -3, 0, -3],
    [0, -3, 0, -3, 0, 0, -3, 0],
    [-3, 0, -3, 0, -3, 0, 0, 0],
], dtype=float)

# coefficient matrix for the edge corrections: rows 1..8 reference the hatted
# face functions, rows 9..12 the interior functions
B_COEF = np.array([
    [0, 0, 0, 0, 0, 0, 1, 1, -2, 1, -2, 1],
    [0, 0, 0, 0, 0, 0, -2, 1, 1, 1, 1, -2],
    [0, 0, 1, 1, -2, 1, 0, 0, 0, 0, -2, 1],
    [0, 0, -2, 1, 1, 1, 0, 0, 0, 0, 1, -2],
    [1, 1, 0, 0, -2, 1, 0, 0, -2, 1, 0, 0],
    [-2, 1, 0, 0, 1, 1, 0, 0, 1, -2, 0, 0],
    [1, 1, -2, 1, 0, 0, -2, 1, 0, 0, 0, 0],
    [-2, 1, 1, 1, 0, 0, 1, -2, 0, 0, 0, 0],
    [0, -9, 0, -9, 0, -9, 3, 3, 3, 3, 3, 3],
    [-9, 0, 3, 3, 3, 3, 0, -9, 0, -9, 3, 3],
    [3, 3, -9, 0, 3, 3, -9, 0, 3, 3, 0, -9],
    [3, 3, 3, 3, -9, 0, 3, 3, -9, 0, -9, 0],
], dtype=float)


def _hatted_basis(edge_fns, face_fns, interior_fns):
    hat_interior = list(interior_fns)
    hat_face = []
    for c in range(8):
        terms = list(face_fns[c])
        for i in range(4):
            if A_COEF[i, c]:
                terms.extend(_scaled(hat_interior[i], A_COEF[i, c]))
        hat_face.append(_combine(terms))
    hat_edge = []
    for c in range(12):
        terms = list(edge_fns[c])
        for i in range(8):
            if B_COEF[i, c]:
                terms.extend(_scaled(hat_face[i], B_COEF[i, c]))
        for i in range(4):
            if B_COEF[8 + i, c]:
                terms.extend(_scaled(hat_interior[i], B_COEF[8 + i, c]))
        hat_edge.append(_combine(terms))
    return hat_edge + hat_face + hat_interior


class BasisFamily:
    """One of the element families N1, EJ1, MEJ1.

    Attributes:
        tag: 'N1', 'EJ1', or 'MEJ1'.
        local_dim: 20 for N1, 24 otherwise.
        lumped: whether the working basis is the hatted one.
        raw_terms: catalogue basis (edge, face, then interior functions).
        terms: working basis used for evaluation and assembly.
        dof_descriptors: ('edge', slot, which) / ('face', f, which) /
            ('interior', f) per local dof.
        dof_nodes: the single lumping node each dof is attached to, as
            ('v', local_vertex) or ('f', local_face).
    """

    def __init__(self, tag, lumped):
        tag = tag.upper()
        if tag not in ("N1", "EJ1", "MEJ1"):
            raise ValueError(f"unknown family tag {tag!r}")
        if tag == "N1" and lumped:
            raise ValueError("N1 has no lumped basis")
        self.tag = tag
        self.lumped = lumped
        edge_fns = _edge_functions()
        face_fns = _face_functions()
        if tag == "N1":
            self.local_dim = 20
            self.raw_terms = edge_fns + face_fns
            self.terms = self.raw_terms
        else:
            self.local_dim = 24
            interior = _interior_functions(tag)
            self.raw_terms = edge_fns + face_fns + interior
            self.terms = (_hatted_basis(edge_fns, face_fns, interior)
                          if lumped else self.raw_terms)

        self.dof_descriptors = []
        for slot in range(6):
            self.dof_descriptors.append(("edge", slot, 0))
            self.dof_descriptors.append(("edge", slot, 1))
        for f in range(4):
            self.dof_descriptors.append(("face", f, 0))
            self.dof_descriptors.append(("face", f, 1))
        if self.local_dim == 24:
            for f in range(4):
                self.dof_descriptors.append(("interior", f))

        self.dof_nodes = []
        for desc in self.dof_descriptors:
            if desc[0] == "edge":
                lo, hi = LOCAL_EDGES[desc[1]]
                self.dof_nodes.append(("v", lo if desc[2] == 0 else hi))
            else:
                self.dof_nodes.append(("f", desc[1]))

    def node_slots(self):
        """Local dof indices grouped by lumping node: 4 vertices then 4 faces."""
        groups = [[] for _ in range(8)]
        for i, (kind, idx) in enumerate(self.dof_nodes):
            groups[idx if kind == "v" else 4 + idx].append(i)
        return groups


_FAMILIES = {}


def get_family(tag, lumped=None):
    """Return a (cached) BasisFamily; lumping defaults on for EJ1 and MEJ1."""
    tag = tag.upper()
    if lumped is None:
        lumped = tag != "N1"
    key = (tag, bool(lumped))
    if key not in _FAMILIES:
        _FAMILIES[key] = BasisFamily(tag, lumped)
    return _FAMILIES[key]


# -----------------------------------------------------------------------------
# evaluation tensors: geometry-free, contracted with per-element gradients

def basis_value_tensor(family, lam):
    """V[q, i, m]: coefficient of grad(lambda_m) in function i at points lam."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    v = np.zeros((lam.shape[0], family.local_dim, 4))
    for i, terms in enumerate(family.terms):
        for c, e, m in terms:
            mono = np.ones(lam.shape[0])
            for ax in range(4):
                if e[ax]:
                    mono = mono * lam[:, ax] ** e[ax]
            v[:, i, m] += c * mono
    return v


def _curl_terms(terms):
    # curl(p grad lam_m) = grad(p) x grad(lam_m); differentiate termwise
    out = []
    for c, e, m in terms:
        for p in range(4):
            if e[p] and p != m:
                de = list(e)
                de[p] -= 1
                out.append((c * e[p], tuple(de), (p, m)))
    return out


def basis_curl_tensor(family, lam):
    """C[q, i, 4*p+m]: coefficient of grad(lam_p) x grad(lam_m) in curl of i."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    v = np.zeros((lam.shape[0], family.local_dim, 16))
    for i, terms in enumerate(family.terms):
        for c, e, (p, m) in _curl_terms(terms):
            mono = np.ones(lam.shape[0])
            for ax in range(4):
                if e[ax]:
                    mono = mono * lam[:, ax] ** e[ax]
            v[:, i, 4 * p + m] += c * mono
    return v


def grad_cross_products(grads):
    """cross[..., p, m, :] = grad(lam_p) x grad(lam_m) for grads (..., 4, 3)."""
    return np.cross(grads[..., :, None, :], grads[..., None, :, :])


def eval_basis(family, geom, point):
    """Values of all local basis functions at one barycentric point.

    Returns a (local_dim, 3) array.  For lumped families these are the hatted
    functions.
    """
    v = basis_value_tensor(family, point)[0]
    return v @ geom.grad_lambda


def eval_curl_basis(family, geom, point):
    """Analytic curls of all local basis functions at one barycentric point."""
    c = basis_curl_tensor(family, point)[0]
    cross = grad_cross_products(geom.grad_lambda).reshape(16, 3)
    return c @ cross


# -----------------------------------------------------------------------------
# lumping transform and rank checks

class LumpedTransform:
    """24x24 matrix T: hatted_j = sum_i T[i, j] * catalogue_i.

    The catalogue ordering is edge functions, face functions, then the four
    interior functions (which appear identically on both sides).
    """

    def __init__(self, matrix, a=None, b=None):
        self.matrix = matrix
        self.a = A_COEF if a is None else a
        self.b = B_COEF if b is None else b


def build_lumped_transform(geom=None, a=None, b=None):
    """Compose the face and edge corrections into one change-of-basis matrix.

    The coefficients are geometry independent; the optional geometry argument
    is accepted for interface symmetry.  Custom a/b matrices are used by the
    sensitivity self-test.
    """
    a = A_COEF if a is None else np.asarray(a, dtype=float)
    b = B_COEF if b is None else np.asarray(b, dtype=float)
    t = np.eye(24)
    for c in range(8):
        t[20:24, 12 + c] += a[:, c]
    for c in range(12):
        col = t[:, c].copy()
        for i in range(8):
            if b[i, c]:
                col += b[i, c] * t[:, 12 + i]
        for i in range(4):
            if b[8 + i, c]:
                col[20 + i] += b[8 + i, c]
        t[:, c] = col
    return LumpedTransform(t, a, b)


def basis_gram(family, geom, rule=None):
    """Gram matrix of the working basis under exact integration."""
    if rule is None:
        rule = gauss_tet_rule()
    v = basis_value_tensor(family, rule.nodes)
    phys = np.einsum("qim,md->qid", v, geom.grad_lambda)
    return geom.volume * np.einsum("q,qid,qjd->ij", rule.weights, phys, phys)


def curl_rank(family, geom, tol=1e-10):
    """Dimension of the curl span of the functions added beyond N1.

    0 for N1, 3 for EJ1 (the interior curls are linearly dependent through
    the bubble gradient), 4 for MEJ1.
    """
    if family.local_dim == 20:
        return 0
    rule = gauss_tet_rule()
    added = BasisFamily(family.tag, lumped=False)
    c = basis_curl_tensor(added, rule.nodes)[:, 20:24, :]
    cross = grad_cross_products(geom.grad_lambda).reshape(16, 3)
    phys = np.einsum("qia,ad->qid", c, cross)
    gram = geom.volume * np.einsum("q,qid,qjd->ij", rule.weights, phys, phys)
    s = np.linalg.svd(gram, compute_uv=False)
    return int(np.sum(s > tol * s[0]))
