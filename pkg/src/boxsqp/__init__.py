"""SQP methods for box-constrained optimal control with PDE instances."""

from .errors import (ConfigError, DimensionError, DomainError, IndefiniteError, InfeasibleError,
                     InvalidExponentError, NonConvergenceError, SetupError, SolverError, StateSolveError)
from .measure import (ActiveSetPartition, BoxBounds, GridFunction, MeasureSpace, classify_active,
                      project_box, weighted_inner, weighted_norm)
from .problem import (FullObjective, LagrangeNewtonOracle, Linearization, Method, ProblemOracle, SqpConfig,
                      fd_gradient_check, fd_hessian_check, gradient, kkt_residual, symmetry_defect)
from .qp import QpInstance, QpResult, qp_objective, solve_projected_gradient, solve_ssn
from .sqp import (IterationRecord, SqpRun, Status, TauBandReport, convergence_errors, estimate_rate,
                  quadratic_tail_ok, run_sqplin, run_sqpnln, stepsize, tau_band_report)

__version__ = "0.1.0"
