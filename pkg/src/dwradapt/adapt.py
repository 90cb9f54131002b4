"""Fixed-rate marking and the goal-driven adaptive refinement loop.

One adaptive level performs: enriched Newton solve (warm started), base
solve balanced against the previous level's discretization estimate,
combined-functional construction, both adjoint solves, estimation with
partition-of-unity localization, marking, and refinement.  The loop stops
once the discretization part of the estimator falls below the tolerance or
the next mesh would exceed the unknown budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import dwr, forms, newton
from .mesh import Mesh, build_mesh
from .multigoal import CombinedGoal, MultiGoalConfig, check_no_cancellation, combine
from .space import FeFunction, build_space, transfer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarkingParams:
    """Fixed-rate marking parameters; coarsening is configured off."""

    refine_fraction: float = 0.1
    coarsen_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.refine_fraction <= 1.0:
            raise ValueError("refine_fraction must lie in [0, 1]")
        if self.coarsen_fraction != 0.0:
            raise ValueError("coarsening is not supported")


def mark_fixed_rate(element_indicators, params: MarkingParams, cell_ids=None):
    """Mark the top ceil(X N) cells plus one, plus exact ties with the smallest
    marked indicator.  Ties in the ordering break by ascending cell id."""
    eta = np.asarray(element_indicators, dtype=float)
    n = len(eta)
    ids = np.arange(n) if cell_ids is None else np.asarray(cell_ids)
    order = np.lexsort((ids, -eta))
    count = min(n, math.ceil(params.refine_fraction * n) + 1)
    threshold = eta[order[count - 1]]
    marked = set(ids[order[:count]].tolist())
    marked.update(ids[eta == threshold].tolist())
    return marked


@dataclass
class LevelRecord:
    """One adaptive level: the study table row plus multigoal bookkeeping."""

    level: int
    dofs: int
    J_tilde: float
    J_enriched: float
    eta2: float
    eta_h2: float
    eta_k: float
    eta_R: float
    I_eff: float
    I_eff_gamma: float
    I_eff_p: float
    I_eff_a: float
    newton_base: int
    newton_enriched: int
    exact_error: float
    # not part of the CSV row:
    goal_values: tuple = ()
    goal_values_enriched: tuple = ()
    goal_reference: tuple = ()
    b_h_hat: float = float("nan")
    no_cancellation_ok: bool = True
    n_cells: int = 0
    max_level: int = 0

    CSV_FIELDS = ("level", "dofs", "J_tilde", "J_enriched", "eta2", "eta_h2",
                  "eta_k", "eta_R", "I_eff", "I_eff_gamma", "I_eff_p", "I_eff_a",
                  "newton_base", "newton_enriched", "exact_error")


class AdaptiveAbort(RuntimeError):
    """Nonlinear solver failure inside the loop; carries the finished records."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


class AdaptiveLoop:
    """Stepper for the adaptive algorithm; one ``step()`` per level.

    The loop is deterministic: restarting from a ``snapshot()`` reproduces
    the continuation bit-identically.
    """

    def __init__(self, problem, goals, mesh: Mesh, params=MarkingParams(),
                 tol_dis=0.0, max_dofs=100000, mode="adaptive", reference=None,
                 s_points=5, newton_tol=1e-8, newton_max_iter=400, weights=None,
                 max_levels=200, log_fn=None):
        if mode not in ("adaptive", "uniform"):
            raise ValueError("mode must be 'adaptive' or 'uniform'")
        goals = [goals] if isinstance(goals, forms.Goal) else list(goals)
        self.problem = problem
        self.goals = goals
        self.config = MultiGoalConfig(goals=tuple(goals), weights=weights)
        self.mesh = mesh
        self.params = params
        self.tol_dis = tol_dis
        self.max_dofs = int(max_dofs)
        self.mode = mode
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self.s_points = s_points
        self.newton_tol = newton_tol
        # a cold start with tiny regularization needs a long damped walk back
        # from the first overshooting update; warm-started levels stay cheap
        self.newton_max_iter = newton_max_iter
        self.max_levels = max_levels
        self.log_fn = log_fn
        self.level = 1
        self.eta_h_prev = 1e-8  # convention for the first level
        self.u_prev = None      # base solution of the previous level
        self.u2_prev = None     # enriched solution of the previous level
        self.goal_values_prev = None
        self.finished = False

    # -- persistable state -------------------------------------------------

    def snapshot(self):
        return {
            "mesh": self.mesh,
            "level": self.level,
            "eta_h_prev": self.eta_h_prev,
            "u_prev": None if self.u_prev is None else np.array(self.u_prev.coeffs),
            "u2_prev": None if self.u2_prev is None else np.array(self.u2_prev.coeffs),
            "goal_values_prev": (None if self.goal_values_prev is None
                                 else np.array(self.goal_values_prev)),
            "finished": self.finished,
        }

    def restore(self, snap):
        self.mesh = snap["mesh"]
        self.level = snap["level"]
        self.eta_h_prev = snap["eta_h_prev"]
        self.finished = snap["finished"]
        self.goal_values_prev = snap["goal_values_prev"]
        if snap["u_prev"] is None:
            self.u_prev = self.u2_prev = None
        else:
            v1 = build_space(self.mesh, 1)
            v2 = build_space(self.mesh, 2)
            self.u_prev = FeFunction(v1, snap["u_prev"])
            self.u2_prev = FeFunction(v2, snap["u2_prev"])
        return self

    # ------------------------------------------------------------------------

    def _single(self):
        return len(self.goals) == 1

    def _goal_for_estimation(self, u2, u_tilde):
        if self._single():
            return self.goals[0]
        return combine(self.config, u2, u_tilde)

    def _reference_value(self, goal):
        if self.reference is None:
            return None
        if self._single():
            return float(self.reference[0])
        return goal.combine_values(self.reference)

    def step(self) -> LevelRecord:
        if self.finished:
            raise RuntimeError("adaptive loop already finished")
        problem, mesh = self.problem, self.mesh
        v1 = build_space(mesh, 1)
        v2 = build_space(mesh, 2)
        if self.log_fn:
            self.log_fn(f"level {self.level}: dofs={v1.dof_count} cells={mesh.n_cells}")

        u2_start = transfer(self.u2_prev, v2) if self.u2_prev is not None else None
        u2, rep2 = newton.newton_solve(problem, v2, initial=u2_start,
                                       tol=self.newton_tol,
                                       max_iter=self.newton_max_iter)
        u1_start = transfer(self.u_prev, v1) if self.u_prev is not None else None
        if self._single():
            builder = lambda uk: self.goals[0]
        else:
            builder = lambda uk: combine(self.config, u2, uk)
        u1, rep1 = newton.newton_solve_goal(problem, v1, builder, self.eta_h_prev,
                                            initial=u1_start,
                                            max_iter=self.newton_max_iter)

        goal = self._goal_for_estimation(u2, u1)
        z1 = dwr.solve_adjoint(problem, v1, u1, goal)
        z2 = dwr.solve_adjoint(problem, v2, u2, goal)
        est = dwr.estimate(problem, goal, u1, z1, u2, z2, s_points=self.s_points)

        goal_vals = np.array([g.value(u1) for g in self.goals])
        goal_vals2 = np.array([g.value(u2) for g in self.goals])
        J_t = goal.value(u1) if not self._single() else float(goal_vals[0])
        J_2 = goal.value(u2) if not self._single() else float(goal_vals2[0])
        J_ref = self._reference_value(goal)
        diag = dwr.diagnostics(est, J_ref, J_t, J_2)

        no_cancel = True
        if not self._single() and self.goal_values_prev is not None:
            no_cancel = check_no_cancellation(self.config, goal_vals2, goal_vals,
                                              self.goal_values_prev).all_ok
        record = LevelRecord(
            level=self.level, dofs=v1.dof_count, J_tilde=J_t, J_enriched=J_2,
            eta2=est.eta2, eta_h2=est.eta_h2, eta_k=est.eta_k, eta_R=est.eta_R,
            I_eff=diag.I_eff, I_eff_gamma=diag.I_eff_gamma,
            I_eff_p=diag.I_eff_primal, I_eff_a=diag.I_eff_adjoint,
            newton_base=rep1.iterations, newton_enriched=rep2.iterations,
            exact_error=(abs(J_ref - J_t) if J_ref is not None else float("nan")),
            goal_values=tuple(goal_vals), goal_values_enriched=tuple(goal_vals2),
            goal_reference=(tuple(self.reference) if self.reference is not None else ()),
            b_h_hat=diag.b_h_hat, no_cancellation_ok=no_cancel,
            n_cells=mesh.n_cells, max_level=int(mesh.levels().max()),
        )
        self._estimate = est  # last level's estimate, for dumps

        if self.tol_dis > 0 and abs(est.eta_h2) < self.tol_dis:
            self.finished = True
        else:
            if self.mode == "uniform":
                marked = set(int(i) for i in mesh.active_ids)
            else:
                marked = mark_fixed_rate(est.element_indicators, self.params,
                                         cell_ids=mesh.active_ids)
            next_mesh = mesh.refine(marked)
            if len(next_mesh.vertices()) > self.max_dofs:
                self.finished = True
            else:
                self.mesh = next_mesh
        self.u_prev, self.u2_prev = u1, u2
        self.goal_values_prev = goal_vals
        self.eta_h_prev = est.eta_h2
        self.level += 1
        return record

    def run(self):
        records = []
        while not self.finished and self.level <= self.max_levels:
            try:
                records.append(self.step())
            except newton.NewtonError as exc:
                raise AdaptiveAbort(f"nonlinear solve failed on level "
                                    f"{self.level}: {exc}", records) from exc
        return records


def run_adaptive(problem, goals, domain, tol_dis=0.0, max_dofs=100000,
                 initial_refinements=1, **kwargs):
    """Run the full adaptive loop on a fresh mesh and return the level records."""
    mesh = domain if isinstance(domain, Mesh) else build_mesh(domain, initial_refinements)
    loop = AdaptiveLoop(problem, goals, mesh, tol_dis=tol_dis, max_dofs=max_dofs,
                        **kwargs)
    return loop.run()
