"""Matplotlib rendering of the study figures next to the CSV output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finite(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y) & (y > 0)
    return x[keep], y[keep]


def render_error_plot(records, path):
    """Log-log error and estimator parts against the number of unknowns."""
    dofs = np.array([r.dofs for r in records], dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    series = [
        ("exact error", [abs(r.exact_error) for r in records], "o-"),
        ("|eta2|", [abs(r.eta2) for r in records], "s-"),
        ("|eta_h2|", [abs(r.eta_h2) for r in records], "^-"),
        ("|eta_R|", [abs(r.eta_R) for r in records], "v-"),
    ]
    for label, vals, style in series:
        x, y = _finite(dofs, vals)
        if len(x):
            ax.loglog(x, y, style, markersize=3, label=label)
    if len(dofs) > 1:
        ref = dofs[np.isfinite(dofs)]
        c = max(abs(records[0].eta2), 1e-12) * ref[0]
        ax.loglog(ref, c / ref, "k:", label="DOFs^-1")
        ax.loglog(ref, c / ref[0] ** 0.5 * ref ** -0.5, "k--", label="DOFs^-1/2")
    ax.set_xlabel("DOFs")
    ax.set_ylabel("goal error / estimate")
    ax.grid(True, which="both", lw=0.3, alpha=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_effectivity_plot(records, path):
    """Effectivity indices against the number of unknowns."""
    dofs = np.array([r.dofs for r in records], dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    for label, vals in [("I_eff", [r.I_eff for r in records]),
                        ("I_eff_gamma", [r.I_eff_gamma for r in records]),
                        ("I_eff_p", [r.I_eff_p for r in records]),
                        ("I_eff_a", [r.I_eff_a for r in records])]:
        x, y = _finite(dofs, vals)
        if len(x):
            ax.semilogx(x, y, "o-", markersize=3, label=label)
    ax.axhline(1.0, color="k", lw=1)
    ax.set_ylim(0.0, 2.5)
    ax.set_xlabel("DOFs")
    ax.set_ylabel("effectivity indices")
    ax.grid(True, which="both", lw=0.3, alpha=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_goal_errors_plot(goal_rows, goal_names, path):
    """Per-goal relative errors for multigoal studies (log-log)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    dofs = np.array([row["dofs"] for row in goal_rows], dtype=float)
    for k, name in enumerate(goal_names):
        vals = np.array([row["rel_err"][k] for row in goal_rows], dtype=float)
        x, y = _finite(dofs, vals)
        if len(x):
            ax.loglog(x, y, "o-", markersize=3, label=f"J{k + 1} ({name})")
    ax.set_xlabel("DOFs")
    ax.set_ylabel("relative goal error")
    ax.grid(True, which="both", lw=0.3, alpha=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
