"""Mass-lumped H(curl) tetrahedral finite elements for time-domain Maxwell problems.

The package provides three second-order edge element families on tetrahedra
(N1, EJ1, MEJ1), a vertex/face-midpoint quadrature rule that turns the MEJ1
mass matrix block-diagonal, explicit leapfrog time integration driven by
block solves, CFL estimation via power iteration, and a convergence harness
with manufactured solutions.
"""

from .errors import (
    LumaxError,
    DegenerateElementError,
    NonManifoldError,
    MeshParseError,
    SolverError,
    FactorizationError,
    AssemblyIntegrityError,
    InstabilityError,
)
from .mesh import Mesh, MeshStats, build_cube_mesh, extract_topology, serialize_mesh, parse_mesh
from .refelem import (
    ElementGeometry,
    QuadratureRule,
    BasisFamily,
    LumpedTransform,
    get_family,
    element_geometry,
    lumping_rule,
    quadrature_integrate,
    exact_monomial_integral,
    eval_basis,
    eval_curl_basis,
    build_lumped_transform,
    curl_rank,
)
from .assembly import (
    DofMap,
    SparseMatrix,
    BlockDiagMatrix,
    build_dof_map,
    assemble_lumped_mass,
    assemble_consistent_mass,
    assemble_stiffness,
    assemble_load,
    elliptic_projection,
    error_norms,
)
from .linalg import RngState, cg_solve, block_factor_solve, power_iteration_max_eig
from .dynamics import TransientState, leapfrog_run, cfl_constant, stability_probe
from .harness import (
    ManufacturedCase,
    RunConfig,
    ConvergenceRow,
    divfree_case,
    nondivfree_case,
    manufactured_eval,
    run_convergence_study,
    compute_eoc,
    run_property_suite,
    emit_results,
)

__version__ = "0.1.0"
