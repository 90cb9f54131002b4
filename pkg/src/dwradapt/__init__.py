"""Goal-oriented adaptive finite elements for the regularized p-Laplacian.

The package solves -div((eps^2 + |grad u|^2)^((p-2)/2) grad u) = f on
quadrilateral meshes with hanging nodes, estimates the error in user-chosen
goal functionals by a dual-weighted residual estimator in enriched (Q2)
spaces, balances nonlinear iteration error against discretization error,
and drives fixed-rate adaptive mesh refinement for single or combined goals.
"""

from .mesh import (DomainSpec, GeometryError, HangingNode, Mesh, UNIT_SQUARE,
                   build_mesh, domain_from_file, hanging_nodes, refine,
                   write_domain_file)
from .space import (FeFunction, QuadratureRule, Space, build_space,
                    dump_function_csv, embed, evaluate, fe_function, gauss_rule,
                    interpolate, shape_values, transfer, zero_function)
from .forms import (Goal, PointValueGoal, ProductPointGoal, Problem,
                    SquaredMeanDeviationGoal, SubdomainIntegralGoal,
                    coefficient_derivatives, derivative_form, example1_problem,
                    goal_derivative, goal_second, goal_value,
                    manufactured_solution, manufactured_source, second_form,
                    semilinear_form, third_form)
from .newton import (LinearSystem, NewtonError, NewtonReport, SolverError,
                     line_search, newton_solve, newton_solve_goal, sigma,
                     sparse_solve)
from .dwr import (Estimate, SaturationReport, UnsupportedProblemError,
                  diagnostics, element_indicators, estimate,
                  iteration_error_via_update, localize_pu, redistribute_hanging,
                  remainder_closed_form, remainder_quadrature, solve_adjoint)
from .multigoal import (CombinationError, CombinedGoal, MultiGoalConfig,
                        NoCancellationReport, check_no_cancellation, combine)
from .adapt import (AdaptiveAbort, AdaptiveLoop, LevelRecord, MarkingParams,
                    mark_fixed_rate, run_adaptive)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
