"""Explicit leapfrog integration, discrete energy, and CFL estimation.

The step is e^{n+1} = 2 e^n - e^{n-1} + tau^2 M^{-1} (g^n - K e^n) with the
mass operator either block-diagonal (lumped families) or a CG-backed solve
for the consistent matrix.  Cost per step: one mass solve, one stiffness
mat-vec; both are counted.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InstabilityError
from .linalg import RngState, cg_solve, power_iteration_max_eig


@dataclass
class TransientState:
    """Pair of consecutive field vectors after n steps of size tau."""
    e_prev: np.ndarray
    e_curr: np.ndarray
    n: int
    tau: float
    t_end: float


@dataclass
class LeapfrogResult:
    state: TransientState
    # (step index, time, coefficient copy) at sampled steps
    samples: list
    # energies[k] = E^{k+1/2}, one entry per step interval
    energies: np.ndarray
    n_steps: int
    loop_k_matvecs: int
    loop_mass_solves: int


class CgMassSolver:
    """Consistent-mass solve adapter matching the block-diagonal interface.

    Warm-starts every solve from the previous solution; in smooth time
    stepping and power iteration this keeps iteration counts low.
    """

    def __init__(self, mass, tol=1e-10, max_iter=20000):
        self.mass = mass
        self.tol = tol
        self.max_iter = max_iter
        self.n_solve = 0
        self._diag = mass.diagonal()
        self._last = None

    @property
    def n_dim(self):
        return self.mass.shape[0]

    def solve(self, r):
        x = cg_solve(self.mass, r, tol=self.tol, max_iter=self.max_iter,
                     x0=self._last, precond_diag=self._diag)
        self._last = x
        self.n_solve += 1
        return x

    def apply(self, x):
        return self.mass.matvec(x)


def leapfrog_run(mass, stiffness, load, init, tau, t_end, sample_every=None,
                 on_sample=None, record_energy=True, blowup_factor=1e12):
    """March the two-step recursion from init = (e^0, e^1) to t_end.

    Args:
        mass: factorized BlockDiagMatrix or CgMassSolver (needs solve/apply).
        stiffness: SparseMatrix K.
        load: callable t -> vector, or None for zero forcing.
        init: (e^0, e^1).
        tau: step size, > 0.
        t_end: final time; the number of steps is round(t_end / tau).
        sample_every: record every s-th state (step multiples of s, step 0
            included).  None disables sampling.
        on_sample: callback (n, t, e) at sample steps; when given, states are
            handed to the callback instead of being stored.
        record_energy: track E^{n+1/2} = 1/2 [ ||(e^{n+1}-e^n)/tau||_M^2
            + e^{n+1} . K e^n ]; the second term equals the midpoint curl
            energy minus the (tau^2/4) correction identically.
        blowup_factor: instability threshold on the state norm relative to
            the initial data (first nonzero state if starting from zero).

    Raises:
        InstabilityError: state norm exceeded blowup_factor x reference.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    e_prev = np.array(init[0], dtype=float)
    e_curr = np.array(init[1], dtype=float)
    if e_prev.shape != e_curr.shape:
        raise ValueError("initial vectors must have equal length")
    n_steps = max(int(round(t_end / tau)), 1)

    samples = []

    def emit(n, e):
        if sample_every is None or n % sample_every != 0:
            return
        if on_sample is not None:
            on_sample(n, n * tau, e)
        else:
            samples.append((n, n * tau, e.copy()))

    energies = [] if record_energy else None
    if record_energy:
        d = (e_curr - e_prev) / tau
        energies.append(0.5 * (float(d @ mass.apply(d))
                               + float(e_curr @ stiffness.matvec(e_prev))))

    ref = max(np.linalg.norm(e_prev), np.linalg.norm(e_curr))
    k_before = stiffness.n_matvec
    m_before = mass.n_solve

    emit(0, e_prev)
    emit(1, e_curr)
    for n in range(1, n_steps):
        ke = stiffness.matvec(e_curr)
        rhs = -ke if load is None else load(n * tau) - ke
        e_next = 2.0 * e_curr - e_prev + (tau * tau) * mass.solve(rhs)
        if record_energy:
            d = (e_next - e_curr) / tau
            energies.append(0.5 * (float(d @ mass.apply(d))
                                   + float(e_next @ ke)))
        nrm = np.linalg.norm(e_next)
        if ref == 0.0:
            ref = nrm
        elif nrm > blowup_factor * ref:
            raise InstabilityError(
                f"state norm {nrm:.3e} exceeds {blowup_factor:g} x initial",
                step=n + 1)
        e_prev, e_curr = e_curr, e_next
        emit(n + 1, e_curr)

    state = TransientState(e_prev=e_prev, e_curr=e_curr, n=n_steps, tau=tau,
                           t_end=t_end)
    return LeapfrogResult(
        state=state, samples=samples,
        energies=np.array(energies) if record_energy else np.empty(0),
        n_steps=n_steps,
        loop_k_matvecs=stiffness.n_matvec - k_before,
        loop_mass_solves=mass.n_solve - m_before)


@dataclass
class CflEstimate:
    """CFL constant c with the quantities it is built from.

    tau_max = c * h = 1/sqrt(lambda_max) is the sufficient step bound; the
    sharp leapfrog threshold is 2/sqrt(lambda_max) = 2 * tau_max.
    """
    c: float
    tau_max: float
    lambda_max: float
    h: float

    @property
    def tau_sharp(self):
        return 2.0 * self.tau_max


def cfl_constant(mesh, mass, stiffness, tol=1e-8, rng=None, max_iter=20000,
                 mass_tol=1e-10):
    """Estimate c = 1/(h sqrt(lambda_max(M^{-1} K))) by power iteration.

    ``mass`` may be a factorized BlockDiagMatrix (lumped families), a
    CgMassSolver, or a consistent SparseMatrix (wrapped in a warm-started CG
    solver internally, for the family without lumping).
    """
    h = float(mesh.h_max if hasattr(mesh, "h_max") else mesh.stats().h_max)
    if hasattr(mass, "solve"):
        solver = mass
    else:
        solver = CgMassSolver(mass, tol=mass_tol, max_iter=max_iter)
    dim = solver.n_dim
    lam = power_iteration_max_eig(
        lambda x: solver.solve(stiffness.matvec(x)), dim, tol=tol, rng=rng,
        max_iter=max_iter, m_apply=solver.apply)
    if lam <= 0.0:
        return CflEstimate(c=math.inf, tau_max=math.inf, lambda_max=lam, h=h)
    tau_max = 1.0 / math.sqrt(lam)
    return CflEstimate(c=tau_max / h, tau_max=tau_max, lambda_max=lam, h=h)


@dataclass
class TauProbe:
    tau: float
    stable: bool
    # first step at which blow-up was detected, None when stable
    step: int | None
    energy_ratio: float


@dataclass
class ProbeReport:
    results: list
    tau_sufficient: float | None = None
    tau_sharp: float | None = None


def stability_probe(mass, stiffness, tau_candidates, n_steps=1000, rng=None,
                    energy_bound=10.0, lambda_max=None):
    """Integrate with zero forcing from random data for each candidate step.

    A candidate is stable when no blow-up occurs and the energy trace stays
    within energy_bound x the initial energy.  The report carries the
    sufficient and sharp thresholds when lambda_max is supplied.
    """
    if rng is None:
        rng = RngState()
    dim = mass.n_dim if hasattr(mass, "n_dim") else mass.shape[0]
    e0 = rng.standard_normal(dim)
    results = []
    for tau in tau_candidates:
        tau = float(tau)
        try:
            run = leapfrog_run(mass, stiffness, None, (e0, e0.copy()), tau,
                               n_steps * tau, record_energy=True)
        except InstabilityError as exc:
            results.append(TauProbe(tau=tau, stable=False, step=exc.step,
                                    energy_ratio=math.inf))
            continue
        e_init = abs(run.energies[0])
        ratio = float(np.abs(run.energies).max() / e_init) if e_init > 0 else 0.0
        results.append(TauProbe(tau=tau, stable=ratio <= energy_bound,
                                step=None, energy_ratio=ratio))
    tau_suf = 1.0 / math.sqrt(lambda_max) if lambda_max else None
    tau_sharp = 2.0 / math.sqrt(lambda_max) if lambda_max else None
    return ProbeReport(results=results, tau_sufficient=tau_suf,
                       tau_sharp=tau_sharp)
