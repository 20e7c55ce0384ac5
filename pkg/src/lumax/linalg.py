"""Iterative kernels: conjugate gradients and power iteration.

Both solvers are deliberately small and deterministic.  Randomized starts go
through RngState so every result is reproducible from a seed.
"""

import numpy as np

from .errors import SolverError


class RngState:
    """Deterministic pseudo-random source; identical seed, identical sequence."""

    def __init__(self, seed=42):
        self.seed = int(seed)
        self.generator = np.random.default_rng(self.seed)

    def standard_normal(self, size):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)


def _as_apply(a):
    if callable(a) and not hasattr(a, "matvec"):
        return a
    if hasattr(a, "matvec"):
        return a.matvec
    arr = np.asarray(a)
    return lambda x: arr @ x


def cg_solve(a, b, tol=1e-10, max_iter=20000, x0=None, precond_diag=None,
             residual_history=None, iterate_history=None):
    """Conjugate gradients for SPD systems to relative residual <= tol.

    Args:
        a: SparseMatrix, dense array, or callable x -> A x.
        b: right-hand side.
        tol: relative residual target ||b - A x|| / ||b||.
        max_iter: iteration cap.
        x0: optional warm start.
        precond_diag: optional positive diagonal for Jacobi preconditioning.
        residual_history: optional list collecting relative residuals.
        iterate_history: optional list collecting copies of each iterate.

    Raises:
        SolverError: cap reached before the tolerance.
    """
    apply_a = _as_apply(a)
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - apply_a(x)
    if precond_diag is not None:
        inv_d = 1.0 / np.asarray(precond_diag, dtype=float)
        z = inv_d * r
    else:
        inv_d = None
        z = r
    p = z.copy()
    rz = float(r @ z)
    res = np.linalg.norm(r) / nb
    if residual_history is not None:
        residual_history.append(res)
    if iterate_history is not None:
        iterate_history.append(x.copy())
    if res <= tol:
        return x
    for _ in range(max_iter):
        ap = apply_a(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            raise SolverError("matrix not positive definite along search direction",
                              residual=res)
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / nb
        if residual_history is not None:
            residual_history.append(res)
        if iterate_history is not None:
            iterate_history.append(x.copy())
        if res <= tol:
            return x
        z = inv_d * r if inv_d is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"conjugate gradients did not reach tol={tol:g} "
                      f"within {max_iter} iterations", residual=res,
                      iterations=max_iter)


def block_factor_solve(block_diag, r):
    """Solve the block-diagonal system; delegates to the factorized blocks."""
    return block_diag.solve(r)


def power_iteration_max_eig(apply_b, dim, tol=1e-8, rng=None, max_iter=20000,
                            m_apply=None):
    """Dominant eigenvalue of an operator symmetric in the M inner product.

    ``apply_b`` realizes x -> M^{-1} K x; Rayleigh quotients and the iterate
    normalization use the M-weighted inner product supplied by ``m_apply``
    (identity if omitted).  Stops when the Rayleigh quotient changes by a
    relative factor <= tol between iterations; a zero operator returns 0.

    Raises:
        SolverError: cap reached; carries the last estimate.
    """
    if rng is None:
        rng = RngState()
    if m_apply is None:
        m_apply = lambda x: x
    x = rng.standard_normal(dim)
    x = x / np.sqrt(float(x @ m_apply(x)))
    lam = None
    for _ in range(max_iter):
        y = apply_b(x)
        my = m_apply(y)
        ymy = float(y @ my)
        if ymy == 0.0:
            return 0.0
        # x is M-normalized, so the Rayleigh quotient collapses to x . My
        lam_new = float(x @ my)
        x = y / np.sqrt(ymy)
        if lam is not None and abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
    raise SolverError(f"power iteration did not settle within {max_iter} iterations",
                      estimate=lam, iterations=max_iter)
