import numpy as np
import pytest

from lumax.assembly import BlockDiagMatrix
from lumax.errors import SolverError
from lumax.linalg import (RngState, block_factor_solve, cg_solve,
                          power_iteration_max_eig)


def _spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def test_rng_state_reproducible():
    a = RngState(7).standard_normal(5)
    b = RngState(7).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngState(8).standard_normal(5))


def test_cg_identity_one_step():
    b = np.array([1.0, -2.0, 3.0])
    x = cg_solve(np.eye(3), b, tol=1e-14)
    assert np.abs(x - b).max() <= 1e-14


def test_cg_against_dense_solve():
    rng = np.random.default_rng(1)
    a = _spd(rng, 30)
    b = rng.standard_normal(30)
    x = cg_solve(a, b, tol=1e-12)
    assert np.abs(x - np.linalg.solve(a, b)).max() <= 1e-8


def test_cg_zero_rhs_returns_zero():
    x = cg_solve(np.eye(4), np.zeros(4))
    assert np.array_equal(x, np.zeros(4))


def test_cg_warm_start_skips_work():
    rng = np.random.default_rng(2)
    a = _spd(rng, 20)
    b = rng.standard_normal(20)
    exact = np.linalg.solve(a, b)
    hist = []
    cg_solve(a, b, tol=1e-10, x0=exact, residual_history=hist)
    assert len(hist) == 1 and hist[0] <= 1e-10


def test_cg_jacobi_preconditioning_helps():
    # badly scaled diagonal: Jacobi restores fast convergence
    d = np.logspace(0, 6, 40)
    a = np.diag(d)
    b = np.ones(40)
    h_plain, h_pre = [], []
    cg_solve(a, b, tol=1e-10, residual_history=h_plain)
    cg_solve(a, b, tol=1e-10, precond_diag=d, residual_history=h_pre)
    assert len(h_pre) <= 3
    assert len(h_pre) < len(h_plain)


def test_cg_residual_history_monotone_tail():
    rng = np.random.default_rng(3)
    a = _spd(rng, 15)
    b = rng.standard_normal(15)
    hist = []
    cg_solve(a, b, tol=1e-12, residual_history=hist)
    assert hist[0] == pytest.approx(1.0)
    assert hist[-1] <= 1e-12


def test_cg_iterate_history_a_norm_monotone():
    # the 2-norm residual may oscillate, the A-norm error may not
    rng = np.random.default_rng(4)
    a = _spd(rng, 25)
    b = rng.standard_normal(25)
    exact = np.linalg.solve(a, b)
    hist = []
    cg_solve(a, b, tol=1e-12, iterate_history=hist)
    errs = [np.sqrt((x - exact) @ a @ (x - exact)) for x in hist]
    for e0, e1 in zip(errs, errs[1:]):
        assert e1 <= e0 * (1 + 1e-12) + 1e-13


def test_cg_iteration_cap_raises_with_context():
    rng = np.random.default_rng(5)
    a = _spd(rng, 30)
    b = rng.standard_normal(30)
    with pytest.raises(SolverError) as exc:
        cg_solve(a, b, tol=1e-14, max_iter=2)
    assert exc.value.iterations == 2
    assert exc.value.residual > 1e-14


def test_cg_rejects_indefinite_curvature():
    a = np.diag([1.0, -1.0])
    with pytest.raises(SolverError):
        cg_solve(a, np.array([0.0, 1.0]), tol=1e-12)


def test_cg_accepts_callable_operator():
    d = np.array([2.0, 3.0, 5.0])
    x = cg_solve(lambda v: d * v, np.ones(3), tol=1e-13)
    assert np.abs(x - 1.0 / d).max() <= 1e-12


def test_block_factor_solve_delegates():
    rng = np.random.default_rng(6)
    blocks = [_spd(rng, 2), _spd(rng, 3)]
    bd = BlockDiagMatrix.from_blocks(blocks)
    r = rng.standard_normal(5)
    got = block_factor_solve(bd, r)
    want = np.concatenate([np.linalg.solve(blocks[0], r[:2]),
                           np.linalg.solve(blocks[1], r[2:])])
    assert np.abs(got - want).max() <= 1e-12


def test_power_iteration_diagonal():
    d = np.array([1.0, 5.0, 3.0])
    lam = power_iteration_max_eig(lambda x: d * x, 3, tol=1e-12,
                                  rng=RngState(1))
    assert lam == pytest.approx(5.0, rel=1e-8)


def test_power_iteration_zero_operator():
    lam = power_iteration_max_eig(lambda x: 0.0 * x, 4, rng=RngState(2))
    assert lam == 0.0


def test_power_iteration_deterministic():
    rng_mat = np.random.default_rng(7)
    a = _spd(rng_mat, 12)
    lam1 = power_iteration_max_eig(lambda x: a @ x, 12, tol=1e-10,
                                   rng=RngState(3))
    lam2 = power_iteration_max_eig(lambda x: a @ x, 12, tol=1e-10,
                                   rng=RngState(3))
    assert lam1 == lam2


def test_power_iteration_m_weighted():
    # eigenvalues of M^{-1} K differ from those of K alone
    m = np.diag([1.0, 4.0])
    k = np.diag([3.0, 4.0])
    apply_b = lambda x: np.linalg.solve(m, k @ x)
    lam = power_iteration_max_eig(apply_b, 2, tol=1e-12, rng=RngState(4),
                                  m_apply=lambda x: m @ x)
    assert lam == pytest.approx(3.0, rel=1e-8)


def test_power_iteration_cap_carries_estimate():
    a = np.diag([1.0, 1.0000001])
    with pytest.raises(SolverError) as exc:
        power_iteration_max_eig(lambda x: a @ x, 2, tol=1e-16, max_iter=3,
                                rng=RngState(5))
    assert exc.value.estimate is not None
    assert exc.value.iterations == 3
