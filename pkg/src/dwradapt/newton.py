"""Nonlinear solvers: residual-driven adaptive Newton and goal-balanced Newton.

Both solvers use exact sparse direct linear solves and a backtracking line
search.  The residual-driven variant stops on the affine-invariant quantity

    sigma = |du_{k-1}| / (1 - (|du_{k-1}| / |du_{k-2}|)^2)

seeded with |du_{-2}| = 1 and |du_{-1}| = 0.99; the goal-balanced variant
stops once the combined goal derivative of the upcoming update drops below
one percent of the previous level's discretization estimate, so nonlinear
iterations are not wasted below discretization accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import forms
from .space import FeFunction, Space, free_inf_norm


class SolverError(RuntimeError):
    """Linear solver failure (singular or numerically unusable matrix)."""


class NewtonError(RuntimeError):
    """Newton iteration cap exceeded; carries the partial report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class LinearSystem:
    """A condensed sparse system (constraints and Dirichlet rows eliminated)."""

    matrix: sp.csr_matrix
    rhs: np.ndarray

    def __post_init__(self):
        m, n = self.matrix.shape
        if m != n or n != len(self.rhs):
            raise ValueError("system matrix must be square and match the rhs")


@dataclass
class NewtonReport:
    iterations: int = 0
    update_norms: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    goal_derivatives: list = field(default_factory=list)
    final_residual: float = np.nan
    stop_reason: str = ""
    line_search_warnings: int = 0


def sparse_solve(system: LinearSystem) -> np.ndarray:
    """Direct sparse solve with iterative refinement to a strict residual bound.

    Guarantees |A x - b|_inf <= 1e-10 (1 + |b|_inf) or raises SolverError with
    a condition estimate.
    """
    A, b = system.matrix.tocsc(), system.rhs
    if A.shape[0] == 0:
        return np.zeros(0)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    x = lu.solve(b)
    bound = 1e-10 * (1.0 + np.max(np.abs(b), initial=0.0))
    for _ in range(3):
        r = b - A @ x
        if not np.all(np.isfinite(r)):
            raise SolverError("sparse solve produced non-finite values "
                              "(matrix numerically singular)")
        if np.max(np.abs(r), initial=0.0) <= bound:
            return x
        x = x + lu.solve(r)
    res = float(np.max(np.abs(b - A @ x), initial=0.0))
    norm_a = spla.onenormest(A)
    inv_op = spla.LinearOperator(A.shape, matvec=lu.solve)
    cond = norm_a * spla.onenormest(inv_op)
    raise SolverError(
        f"sparse solve residual {res:.3e} exceeds bound {bound:.3e}; "
        f"estimated 1-norm condition number {cond:.3e}")


def sigma(norm_prev: float, norm_prev2: float) -> float:
    """Affine-invariant Newton stopping quantity from two update norms.

    Negative values flag growth (keep iterating); an exact ratio of one
    returns +inf so the iteration continues.
    """
    if not norm_prev2 > 0:
        raise ValueError("norm_prev2 must be positive")
    ratio = norm_prev / norm_prev2
    denom = 1.0 - ratio * ratio
    if denom == 0.0:
        return np.inf
    return norm_prev / denom


def _dirichlet_values(problem, space):
    g = forms._as_field(problem.dirichlet)
    xy = space.node_coords[space.boundary_dofs]
    return g(xy[:, 0], xy[:, 1])


def initial_guess(problem, space, start=None) -> FeFunction:
    """Zero (or transferred) coefficients with boundary values imposed."""
    coeffs = np.zeros(space.dof_count) if start is None else np.array(start.coeffs)
    coeffs[space.boundary_dofs] = _dirichlet_values(problem, space)
    return FeFunction(space, space.distribute(coeffs))


def _condensed(problem, space, u, with_matrix=True):
    raw = forms.semilinear_form(problem, space, u)
    r = space.condense(raw)[space.free_dofs]
    if not with_matrix:
        return r
    K = space.condense_matrix(forms.derivative_form(problem, space, u))
    K = K[space.free_dofs][:, space.free_dofs]
    return r, K


def _expand_update(space, du_free):
    du = np.zeros(space.dof_count)
    du[space.free_dofs] = du_free
    return space.distribute(du)


def line_search(problem, space, u: FeFunction, du: FeFunction, res_norm=None):
    """Backtracking alpha = 2^-j, smallest j in 0..10 that reduces |residual|_inf.

    Falls back to alpha = 1 with a warning flag when no candidate reduces the
    residual (degenerate steps, e.g. du = 0)."""
    if res_norm is None:
        res_norm = np.max(np.abs(_condensed(problem, space, u, with_matrix=False)),
                          initial=0.0)
    for j in range(11):
        alpha = 0.5 ** j
        trial = FeFunction(space, space.distribute(u.coeffs + alpha * du.coeffs))
        r = _condensed(problem, space, trial, with_matrix=False)
        if np.max(np.abs(r), initial=0.0) < res_norm:
            return alpha, False
    return 1.0, True


def newton_solve(problem, space, initial=None, tol=1e-8, max_iter=50, log_fn=None):
    """Residual-driven Newton with the sigma stopping rule.

    Iterates while sigma > tol (|u|_inf + |du|_inf) or sigma < 0, solving the
    Jacobian system exactly and applying a backtracking line search.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    u = initial_guess(problem, space, initial)
    rep = NewtonReport()
    norms = [1.0, 0.99]
    while True:
        sig = sigma(norms[-1], norms[-2])
        rep.sigmas.append(sig)
        if 0.0 <= sig <= tol * (free_inf_norm(space, u.coeffs) + norms[-1]):
            rep.stop_reason = "sigma-criterion"
            break
        if rep.iterations >= max_iter:
            rep.stop_reason = "max-iter"
            raise NewtonError(f"Newton did not converge in {max_iter} iterations", rep)
        r, K = _condensed(problem, space, u)
        res_norm = float(np.max(np.abs(r), initial=0.0))
        rep.residual_norms.append(res_norm)
        du_free = sparse_solve(LinearSystem(K, -r))
        du = FeFunction(space, _expand_update(space, du_free))
        alpha, warn = line_search(problem, space, u, du, res_norm)
        rep.line_search_warnings += int(warn)
        u = FeFunction(space, space.distribute(u.coeffs + alpha * du.coeffs))
        norms.append(free_inf_norm(space, du.coeffs))
        rep.update_norms.append(norms[-1])
        rep.alphas.append(alpha)
        rep.iterations += 1
        if log_fn is not None:
            log_fn(f"newton k={rep.iterations} |du|={norms[-1]:.3e} "
                   f"sigma={sig:.3e} alpha={alpha}")
    rep.final_residual = float(np.max(np.abs(
        _condensed(problem, space, u, with_matrix=False)), initial=0.0))
    return u, rep


def newton_solve_goal(problem, space, goal_builder, eta_prev, initial=None,
                      max_iter=50, log_fn=None):
    """Goal-balanced Newton: iterate while the combined goal derivative of the
    upcoming update exceeds 1e-2 |eta_prev|.

    ``goal_builder(u)`` rebuilds the (combined) goal functional at the current
    iterate; the final computed update enters only the stopping test.
    """
    u = initial_guess(problem, space, initial)
    rep = NewtonReport()
    threshold = 1e-2 * abs(eta_prev)

    def next_update(u):
        r, K = _condensed(problem, space, u)
        rep.residual_norms.append(float(np.max(np.abs(r), initial=0.0)))
        du_free = sparse_solve(LinearSystem(K, -r))
        return FeFunction(space, _expand_update(space, du_free))

    du = next_update(u)
    while True:
        goal = goal_builder(u)
        jprime = goal.derivative_apply(u, du)
        rep.goal_derivatives.append(jprime)
        if log_fn is not None:
            log_fn(f"newton-goal k={rep.iterations} |J'(du)|={abs(jprime):.3e} "
                   f"threshold={threshold:.3e}")
        if abs(jprime) <= threshold:
            rep.stop_reason = "goal-criterion"
            break
        if rep.iterations >= max_iter:
            rep.stop_reason = "max-iter"
            raise NewtonError(f"goal-balanced Newton did not converge in "
                              f"{max_iter} iterations", rep)
        alpha, warn = line_search(problem, space, u, du)
        rep.line_search_warnings += int(warn)
        u = FeFunction(space, space.distribute(u.coeffs + alpha * du.coeffs))
        rep.update_norms.append(free_inf_norm(space, du.coeffs))
        rep.alphas.append(alpha)
        rep.iterations += 1
        du = next_update(u)
    rep.final_residual = rep.residual_norms[-1]
    return u, rep
