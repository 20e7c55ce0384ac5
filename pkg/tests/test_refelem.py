import math

import numpy as np
import pytest

from lumax.refelem import (A_COEF, B_COEF, basis_curl_tensor, basis_gram,
                           basis_value_tensor, build_lumped_transform,
                           curl_rank, element_geometry, eval_basis,
                           eval_curl_basis, exact_monomial_integral,
                           gauss_tet_rule, get_family, lumping_rule,
                           quadrature_integrate)

REF_VERTS = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def _random_tet(rng):
    while True:
        v = rng.standard_normal((4, 3))
        if abs(np.linalg.det(v[1:] - v[0])) / 6.0 > 1e-3:
            return v


def test_element_geometry_reference_tet():
    geom = element_geometry(REF_VERTS)
    assert geom.volume == pytest.approx(1.0 / 6.0)
    assert np.allclose(geom.grad_lambda[0], [-1, -1, -1])
    assert np.allclose(geom.grad_lambda[1:], np.eye(3))


def test_element_geometry_rejects_flat_tet():
    from lumax.errors import DegenerateElementError
    flat = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0]])
    with pytest.raises(DegenerateElementError):
        element_geometry(flat)


def test_lumping_rule_weights_and_nodes():
    rule = lumping_rule()
    assert rule.nodes.shape == (8, 4)
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-15)
    # four vertices with weight 1/40, four face midpoints with weight 9/40
    assert np.allclose(sorted(rule.weights), [1 / 40] * 4 + [9 / 40] * 4)
    vertex_rows = rule.nodes[:4]
    assert np.allclose(vertex_rows, np.eye(4))
    assert np.allclose(rule.nodes[4:].sum(axis=1), 1.0)


def test_monomial_oracle_values():
    # degree 0: the volume itself; lambda_1: |K|/4; lambda_1^2 lambda_2^2: |K|/210
    assert exact_monomial_integral((0, 0, 0, 0), 1.0) == pytest.approx(1.0)
    assert exact_monomial_integral((1, 0, 0, 0), 1.0) == pytest.approx(0.25)
    assert exact_monomial_integral((2, 2, 0, 0), 1.0) == pytest.approx(1 / 210)
    with pytest.raises(ValueError):
        exact_monomial_integral((1, -1, 0, 0), 1.0)


def test_eight_node_rule_degree_three_and_witness():
    rng = np.random.default_rng(11)
    geom = element_geometry(_random_tet(rng))
    lam = lumping_rule().nodes
    w = lumping_rule().weights
    for expo in ((1, 0, 0, 0), (1, 1, 0, 0), (1, 1, 1, 0), (3, 0, 0, 0),
                 (2, 1, 0, 0)):
        got = geom.volume * float(w @ np.prod(lam ** np.array(expo), axis=1))
        assert got == pytest.approx(exact_monomial_integral(expo, geom.volume),
                                    rel=1e-13)
    witness = geom.volume * float(w @ (lam[:, 0] ** 2 * lam[:, 1] ** 2))
    assert witness == pytest.approx(geom.volume / 180.0, rel=1e-13)
    assert witness != pytest.approx(geom.volume / 210.0, rel=1e-3)


def test_gauss_rule_exact_to_degree_nine():
    rule = gauss_tet_rule()
    worst = 0.0
    for expo in ((9, 0, 0, 0), (3, 3, 3, 0), (2, 2, 2, 3), (4, 3, 2, 0)):
        got = float(rule.weights @ np.prod(rule.nodes ** np.array(expo), axis=1))
        want = exact_monomial_integral(expo, 1.0)
        worst = max(worst, abs(got - want) / want)
    assert worst <= 1e-12


def test_quadrature_integrate_physical_argument():
    geom = element_geometry(REF_VERTS)
    # integral of x over the reference tet = |K|/4
    got = quadrature_integrate(geom, lambda p: p[0])
    assert got == pytest.approx(1.0 / 24.0, rel=1e-13)


def test_family_shapes_and_validation():
    assert get_family("N1").local_dim == 20
    assert get_family("EJ1").local_dim == 24
    assert get_family("MEJ1").local_dim == 24
    assert get_family("mej1").tag == "MEJ1"
    with pytest.raises(ValueError):
        get_family("N1", lumped=True)
    with pytest.raises(ValueError):
        get_family("XX1")


def test_node_slots_partition():
    for tag in ("EJ1", "MEJ1"):
        fam = get_family(tag)
        slots = fam.node_slots()
        assert len(slots) == 8
        assert sorted(i for group in slots for i in group) == list(range(24))
        assert all(len(g) == 3 for g in slots)


def test_coefficient_matrix_shapes():
    assert A_COEF.shape == (4, 8)
    assert B_COEF.shape == (12, 12)
    t = build_lumped_transform().matrix
    assert t.shape == (24, 24)
    assert abs(np.linalg.det(t) - 1.0) <= 1e-12
    # interior functions are carried over unchanged
    assert np.array_equal(t[:, 20:], np.eye(24)[:, 20:])


def test_hatted_basis_is_catalogue_times_transform():
    rng = np.random.default_rng(12)
    lam = rng.dirichlet(np.ones(4), size=20)
    for tag in ("EJ1", "MEJ1"):
        raw = basis_value_tensor(get_family(tag, lumped=False), lam)
        hat = basis_value_tensor(get_family(tag), lam)
        t = build_lumped_transform().matrix
        assert np.abs(np.einsum("qim,ij->qjm", raw, t) - hat).max() <= 1e-12


def test_lumping_locality():
    rng = np.random.default_rng(13)
    geom = element_geometry(_random_tet(rng))
    nodes = lumping_rule().nodes
    for tag in ("EJ1", "MEJ1"):
        fam = get_family(tag)
        vals = np.einsum("qim,md->qid", basis_value_tensor(fam, nodes),
                         geom.grad_lambda)
        slots = fam.node_slots()
        scale = np.abs(vals).max()
        for q, group in enumerate(slots):
            others = [i for i in range(24) if i not in group]
            assert np.abs(vals[q, others]).max() <= 1e-13 * scale


def test_locality_breaks_under_perturbation():
    rng = np.random.default_rng(14)
    geom = element_geometry(_random_tet(rng))
    b_bad = B_COEF.copy()
    b_bad[0, 6] += 1e-3
    t_bad = build_lumped_transform(a=A_COEF, b=b_bad).matrix
    raw = basis_value_tensor(get_family("MEJ1", lumped=False),
                             lumping_rule().nodes)
    vals = np.einsum("qim,ij,md->qjd", raw, t_bad, geom.grad_lambda)
    slots = get_family("MEJ1").node_slots()
    worst = max(np.abs(vals[q, [i for i in range(24) if i not in group]]).max()
                for q, group in enumerate(slots))
    assert worst > 1e-5 * np.abs(vals).max()


def test_added_functions_sum_to_bubble_gradient():
    rng = np.random.default_rng(15)
    geom = element_geometry(_random_tet(rng))
    lam = rng.dirichlet(np.ones(4), size=10)
    v = basis_value_tensor(get_family("EJ1", lumped=False), lam)
    w_sum = np.einsum("qim,md->qd", v[:, 20:24], geom.grad_lambda)
    grad_b = np.zeros((10, 3))
    for m in range(4):
        grad_b += (np.prod(np.delete(lam, m, axis=1), axis=1)[:, None]
                   * geom.grad_lambda[m])
    assert np.abs(w_sum - grad_b).max() <= 1e-13 * np.abs(grad_b).max()


def test_added_functions_vanish_tangentially_on_faces():
    rng = np.random.default_rng(16)
    geom = element_geometry(_random_tet(rng))
    for tag in ("EJ1", "MEJ1"):
        fam = get_family(tag, lumped=False)
        for face in range(4):
            lam = np.zeros((6, 4))
            lam[:, [m for m in range(4) if m != face]] = rng.dirichlet(
                np.ones(3), size=6)
            vals = np.einsum("qim,md->qid",
                             basis_value_tensor(fam, lam)[:, 20:24],
                             geom.grad_lambda)
            nrm = geom.grad_lambda[face]
            nrm = nrm / np.linalg.norm(nrm)
            tang = vals - np.einsum("qid,d->qi", vals, nrm)[..., None] * nrm
            assert np.abs(tang).max() <= 1e-11 * max(1.0, np.abs(vals).max())


def test_curl_ranks_and_gram_rank():
    geom = element_geometry(REF_VERTS)
    assert curl_rank(get_family("N1"), geom) == 0
    assert curl_rank(get_family("EJ1"), geom) == 3
    assert curl_rank(get_family("MEJ1"), geom) == 4
    g = basis_gram(get_family("MEJ1"), geom)
    s = np.linalg.svd(g, compute_uv=False)
    assert int((s > 1e-10 * s[0]).sum()) == 24


def test_eval_basis_matches_tensor_contraction():
    rng = np.random.default_rng(17)
    geom = element_geometry(_random_tet(rng))
    fam = get_family("MEJ1")
    lam = rng.dirichlet(np.ones(4))
    direct = eval_basis(fam, geom, lam)
    via_tensor = np.einsum("im,md->id",
                           basis_value_tensor(fam, lam[None])[0],
                           geom.grad_lambda)
    assert np.abs(direct - via_tensor).max() <= 1e-12
    c_direct = eval_curl_basis(fam, geom, lam)
    assert c_direct.shape == (24, 3)


def test_interior_function_l2_norm_oracle():
    # |w4*|^2 on the reference tet from the factorial formula
    geom = element_geometry(REF_VERTS)
    fam = get_family("MEJ1", lumped=False)
    rule = gauss_tet_rule()
    v = basis_value_tensor(fam, rule.nodes)
    w4 = np.einsum("qm,md->qd", v[:, 23], geom.grad_lambda)
    got = geom.volume * float(rule.weights @ np.einsum("qd,qd->q", w4, w4))
    terms = [(1, (2, 2, 2, 0)), (1, (2, 4, 2, 0)), (1, (4, 2, 2, 0)),
             (2, (2, 3, 2, 0)), (-2, (3, 2, 2, 0)), (-2, (3, 3, 2, 0))]
    want = sum(c * exact_monomial_integral(e, geom.volume) for c, e in terms)
    assert got == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(2.324835658169312e-05, rel=1e-12)


def test_curl_tensor_shapes():
    fam = get_family("MEJ1")
    lam = np.full((5, 4), 0.25)
    assert basis_value_tensor(fam, lam).shape == (5, 24, 4)
    assert basis_curl_tensor(fam, lam).shape == (5, 24, 16)
