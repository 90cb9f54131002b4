"""Combination of several goal functionals into one weighted functional.

The error-weighting function shipped here is the weighted relative sum
E(x, J(ut)) = sum_i w_i x_i / |J_i(ut)|, realized through the signed
combined functional

    J_c(v) = sum_i  w_i sign(J_i(u2) - J_i(ut)) / |J_i(ut)|  J_i(v),

whose signs are frozen against the enriched solution, so all componentwise
error contributions enter with the same sign and cannot cancel.  Other
strictly monotone weighting functions fit the same interface but are not
shipped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .forms import Goal

log = logging.getLogger(__name__)


class CombinationError(ValueError):
    """A functional value required as a denominator vanished."""


@dataclass(frozen=True)
class MultiGoalConfig:
    """Component goals plus positive weights (default all one)."""

    goals: tuple
    weights: tuple = None

    def __post_init__(self):
        goals = tuple(self.goals)
        weights = (tuple(float(w) for w in self.weights)
                   if self.weights is not None else (1.0,) * len(goals))
        if len(weights) != len(goals):
            raise ValueError("one weight per goal required")
        if any(w <= 0 for w in weights):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class CombinedGoal(Goal):
    """Weighted sum of goals with signed weights frozen at construction."""

    goals: tuple
    signed_weights: tuple
    name: str = "combined"

    @property
    def third_is_zero(self):
        return all(getattr(g, "third_is_zero", False) for g in self.goals)

    def value(self, u):
        return sum(w * g.value(u) for w, g in zip(self.signed_weights, self.goals))

    def derivative_atoms(self, u):
        atoms = []
        for w, g in zip(self.signed_weights, self.goals):
            for a in g.derivative_atoms(u):
                atoms.append(type(a)(**{**a.__dict__, "coef": w * a.coef}))
        return tuple(atoms)

    def second(self, u, phi, psi):
        return sum(w * g.second(u, phi, psi)
                   for w, g in zip(self.signed_weights, self.goals))

    def combine_values(self, values):
        """Apply the frozen weights to a vector of per-goal values."""
        return float(np.dot(self.signed_weights, values))


def _goal_values(config, u):
    if hasattr(u, "space"):
        return np.array([g.value(u) for g in config.goals])
    return np.asarray(u, dtype=float)


def combine(config: MultiGoalConfig, u2, u_tilde) -> CombinedGoal:
    """Build the combined functional from the enriched and base solutions.

    Signs come from J_i(u2) - J_i(ut); denominators are the current |J_i(ut)|.
    A vanishing J_i(ut) makes the relative weighting undefined and raises.
    """
    j2 = _goal_values(config, u2)
    jt = _goal_values(config, u_tilde)
    weights = []
    for k, (g, om) in enumerate(zip(config.goals, config.weights)):
        if jt[k] == 0.0:
            raise CombinationError(
                f"goal {k} ({g.name}) evaluates to zero; relative weighting undefined")
        sign = np.sign(j2[k] - jt[k])
        if sign == 0.0:
            log.debug("goal %d (%s): enriched and base values coincide", k, g.name)
            sign = 1.0
        weights.append(om * sign / abs(jt[k]))
    return CombinedGoal(goals=tuple(config.goals), signed_weights=tuple(weights))


@dataclass(frozen=True)
class NoCancellationReport:
    """Per-goal outcome of the cancellation-avoidance hypothesis."""

    outside: tuple      # J_i(u2) outside the closed interval of the candidates
    degenerate: tuple   # all three values coincide
    all_ok: bool


def check_no_cancellation(config: MultiGoalConfig, u2, u_tilde_1, u_tilde_2):
    """Check J_i(u2) not in [J_i(ut1), J_i(ut2)] (closed, either orientation).

    When the hypothesis holds for every goal, decreasing componentwise errors
    against u2 imply a decreasing combined error functional.  Arguments may be
    finite element functions or precomputed value sequences.
    """
    j2 = _goal_values(config, u2)
    ja = _goal_values(config, u_tilde_1)
    jb = _goal_values(config, u_tilde_2)
    lo = np.minimum(ja, jb)
    hi = np.maximum(ja, jb)
    outside = tuple(bool(v < l or v > h) for v, l, h in zip(j2, lo, hi))
    degenerate = tuple(bool(v == l == h) for v, l, h in zip(j2, lo, hi))
    return NoCancellationReport(outside=outside, degenerate=degenerate,
                                all_ok=all(outside))
