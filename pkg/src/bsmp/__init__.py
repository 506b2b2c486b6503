"""Least-squares Monte Carlo toolkit for controlled backward SDEs with
maximum-principle control optimization."""

from .adjoint import AdjointPath, HamiltonianEval, hamiltonian, solve_adjoint
from .bsde import (
    ControlProcess,
    RegressionBasis,
    RegressionFit,
    TrajectoryBundle,
    VariationalSolution,
    regress,
    solve_bsde,
    solve_difference,
    solve_variational,
)
from .diagnostics import (
    ConvergenceTable,
    DualityReport,
    NormEstimates,
    duality_check,
    empirical_norms,
    lemma4_table,
    lemma5_table,
    lemma6_check,
)
from .errors import BsmpError, ConfigError, GradCheckError, RegressionError, SolverError
from .model import (
    AssumptionProfile,
    AssumptionReport,
    ControlSet,
    Dimensions,
    ProblemSpec,
    grad_check,
    project_control,
    validate_assumptions,
)
from .models import REGISTRY, ModelRegistryEntry, build_model, model_oracle
from .sampling import PathEnsemble, TimeGrid, mean_and_se, sample_ensemble
from .smp import (
    CostBreakdown,
    OptimizeResult,
    StationarityReport,
    check_stationarity,
    directional_derivative,
    evaluate_cost_augmented,
    evaluate_cost_direct,
    hamiltonian_control_grad,
    optimize,
    perturb,
)

__version__ = "0.1.0"
