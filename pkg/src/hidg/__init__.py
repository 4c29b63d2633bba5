"""hp local discontinuous Galerkin solver for hyperbolic integro-differential equations.

The model problem is u_tt - div(A grad u + int_0^t B(t, s) grad u(s) ds) = f on a
polygonal domain with homogeneous Dirichlet data, discretized by a mixed DG method
on triangles and a Crank-Nicolson type scheme in time.
"""

from .dgspace import DGSpace, FieldCoeffs, FieldKind, eval_field, interpolate, l2_error, l2_project
from .forms import (
    REGIMES,
    AssemblyError,
    KernelMass,
    ProblemCoefficients,
    RateExponents,
    StabilizationConfig,
    SystemMatrices,
    assemble_system,
)
from .harness import (
    ErrorReport,
    StudyConfig,
    build_manufactured,
    run_convergence_study,
    solve_level,
    write_report_csv,
)
from .memory import History, HistoryError, TimeGrid
from .mesh import Mesh, MeshError, build_uniform_triangulation, import_mesh, refine_uniform
from .stepper import SolverError, Stepper, TimeState, energy_norm

__version__ = "0.1.0"

__all__ = [
    "DGSpace",
    "FieldCoeffs",
    "FieldKind",
    "eval_field",
    "interpolate",
    "l2_error",
    "l2_project",
    "REGIMES",
    "AssemblyError",
    "KernelMass",
    "ProblemCoefficients",
    "RateExponents",
    "StabilizationConfig",
    "SystemMatrices",
    "assemble_system",
    "ErrorReport",
    "StudyConfig",
    "build_manufactured",
    "run_convergence_study",
    "solve_level",
    "write_report_csv",
    "History",
    "HistoryError",
    "TimeGrid",
    "Mesh",
    "MeshError",
    "build_uniform_triangulation",
    "import_mesh",
    "refine_uniform",
    "SolverError",
    "Stepper",
    "TimeState",
    "energy_norm",
]
