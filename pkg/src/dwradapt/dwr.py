"""Adjoint solves, the computable goal-error estimator and its parts, the
nonlinear remainder term, partition-of-unity localization with hanging-node
redistribution, and element indicators.

The estimator splits as

    eta2 = eta_h2 + eta_k + eta_R

where eta_h2 = 1/2 rho(ut)(z2 - zt) + 1/2 rho*(ut, zt)(u2 - ut) is the
discretization part, eta_k = rho(ut)(zt) the iteration-error part, and
eta_R the third-order remainder.  With exact enriched solves the total
reproduces J(u2) - J(ut) identically, for arbitrary base-space ut, zt.
All pairings are integrated with the enriched space's quadrature so that
identity survives discretely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import forms
from .newton import LinearSystem, sparse_solve
from .space import FeFunction, Space, build_space, embed, _shape_tables


class UnsupportedProblemError(ValueError):
    """Requested closed form is not available for this problem."""


@dataclass
class Estimate:
    """Estimator record: totals, the three parts, and localized indicators."""

    eta2: float
    eta_h2: float
    eta_k: float
    eta_R: float
    primal_part: float
    adjoint_part: float
    node_indicators: np.ndarray      # per PU vertex, after hanging redistribution
    element_indicators: np.ndarray   # per active cell, |discretization| + |remainder|
    element_remainders: np.ndarray   # signed remainder restricted to each cell


@dataclass
class SaturationReport:
    """Effectivity indices and measured saturation quantities."""

    I_eff: float
    I_eff_gamma: float
    I_eff_primal: float
    I_eff_adjoint: float
    b_h_hat: float
    gamma_hat: float


def solve_adjoint(problem, space: Space, u_lin: FeFunction, goal) -> FeFunction:
    """Solve the linearized-transposed problem A'(u_lin)^T z = J'(u_lin).

    The adjoint carries homogeneous Dirichlet data on the whole boundary.
    """
    K = space.condense_matrix(forms.derivative_form(problem, space, u_lin))
    K = K[space.free_dofs][:, space.free_dofs]
    rhs = space.condense(goal.derivative_vector(u_lin, space))[space.free_dofs]
    z_free = sparse_solve(LinearSystem(K.T.tocsr(), rhs))
    z = np.zeros(space.dof_count)
    z[space.free_dofs] = z_free
    return FeFunction(space, space.distribute(z))


def _s_gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w  # mapped to [0, 1]


def remainder_quadrature(problem, goal, u_t, z_t, u2, z2, s_points=5, per_cell=False):
    """Remainder R = 1/2 int_0^1 [J'''(ut+se)(e,e,e) - A'''(ut+se)(e,e,e, zt+se*)
    - 3 A''(ut+se)(e,e,e*)] s(s-1) ds with e = u2-ut, e* = z2-zt.

    All four functions must live in the same (enriched) space; each s node
    costs one spatial assembly.  The integrand is cubic in s whenever the
    operator is cubic (p = 4) and the goal has a vanishing third derivative,
    so two Gauss points are already exact in that case.
    """
    if s_points < 2:
        raise ValueError("s_points must be >= 2")
    space = u2.space
    e = FeFunction(space, u2.coeffs - u_t.coeffs)
    estar = FeFunction(space, z2.coeffs - z_t.coeffs)
    nodes, weights = _s_gauss(s_points)
    acc = np.zeros(space.n_cells) if per_cell else 0.0
    goal_zero = getattr(goal, "third_is_zero", False)
    for s, w in zip(nodes, weights):
        us = FeFunction(space, u_t.coeffs + s * e.coeffs)
        zs = FeFunction(space, z_t.coeffs + s * estar.coeffs)
        val = -forms.third_form(problem, space, us, e, e, e, zs, per_cell=per_cell)
        val = val - 3.0 * forms.second_form(problem, space, us, e, e, estar,
                                            per_cell=per_cell)
        if not goal_zero:
            val = val + goal.third(us, e, e, e)
        acc = acc + 0.5 * w * s * (s - 1.0) * val
    return acc


def _cubic_b_form(problem, space, w, phi, psi, v, per_cell=False):
    # For p = 4 the second derivative is A''(u) = B u with the linear operator
    # B w = 2 [(grad phi . grad psi)(grad w . grad v) + sym]; a'' vanishes, so
    # second_form evaluated at linearization point w is exactly (B w).
    return forms.second_form(problem, space, w, phi, psi, v, per_cell=per_cell)


def remainder_closed_form(problem, goal, u_t, z_t, u2, z2, per_cell=False):
    """Closed-form remainder for the cubic operator (p = 4) and goals with
    vanishing third derivative:

        R = 1/24 [3 (B(u2 + ut))(e, e, e*) + (B e)(e, e, z2 + zt)]

    where A''(u) = B u is linear in u and carries no constant part.
    """
    if problem.p != 4.0:
        raise UnsupportedProblemError("closed-form remainder requires p = 4")
    if not getattr(goal, "third_is_zero", False):
        raise UnsupportedProblemError(
            "closed-form remainder requires a goal with vanishing third derivative")
    space = u2.space
    e = FeFunction(space, u2.coeffs - u_t.coeffs)
    estar = FeFunction(space, z2.coeffs - z_t.coeffs)
    usum = FeFunction(space, u2.coeffs + u_t.coeffs)
    zsum = FeFunction(space, z2.coeffs + z_t.coeffs)
    term1 = _cubic_b_form(problem, space, usum, e, e, estar, per_cell=per_cell)
    term2 = _cubic_b_form(problem, space, e, e, e, zsum, per_cell=per_cell)
    return (3.0 * term1 + term2) / 24.0


def iteration_error_via_update(problem, space, goal, u_t, du) -> float:
    """Adjoint-free iteration-error value J'(ut)(du) for the next Newton update.

    Coincides with -A(ut)(z_hat) for the exact discrete adjoint z_hat at ut.
    """
    return goal.derivative_apply(u_t, du)


def redistribute_hanging(mesh, node_values):
    """Move each hanging node's indicator in two equal halves to the coarse
    edge endpoints; the total is preserved exactly."""
    out = np.array(node_values, dtype=float)
    for h in mesh.hanging_nodes():
        half = 0.5 * out[h.node]
        out[h.endpoints[0]] += half
        out[h.endpoints[1]] += half
        out[h.node] = 0.0
    return out


def localize_pu(problem, goal, u_emb, z_emb, u2, z2, pu_space: Space):
    """Partition-of-unity node indicators of the discretization estimator.

    eta_i = 1/2 rho(ut)((z2 - zt) psi_i) + 1/2 rho*(ut, zt)((u2 - ut) psi_i)
    with unconstrained bilinear hats psi_i; hanging-node contributions are
    redistributed to the coarse edge endpoints afterwards.  The indicators
    sum to the global discretization part.
    """
    space = u2.space
    mesh = space.mesh
    if pu_space.order != 1 or pu_space.mesh is not mesh:
        raise ValueError("the partition of unity must be the Q1 space on the same mesh")
    wp = FeFunction(space, z2.coeffs - z_emb.coeffs)   # primal weight
    wa = FeFunction(space, u2.coeffs - u_emb.coeffs)   # adjoint weight
    eta = np.zeros(pu_space.dof_count)

    ref_vals, ref_grads = space.shape_tables()
    hat_vals, hat_grads = _shape_tables(1, space.quad.points)
    _, _, jxw, scale = space.geometry()
    phys = space.quad_points_phys()
    ffun = forms._as_field(problem.f)
    pu_dofs = pu_space.cell_dofs

    for sl in forms._chunks(space.n_cells):
        g_u = forms._grads(space, u_emb.coeffs, sl)
        t = np.einsum("cqd,cqd->cq", g_u, g_u)
        a, a1, _, _ = forms.coefficient_derivatives(problem, t)
        fv = ffun(phys[sl, :, 0], phys[sl, :, 1])
        g_z = forms._grads(space, z_emb.coeffs, sl)
        hats = np.broadcast_to(hat_vals[None], (g_u.shape[0],) + hat_vals.shape)
        hgr = hat_grads[None, :, :, :] * scale[sl, None, None, :]

        loc = np.zeros((g_u.shape[0], 4))
        for wfun, kind in ((wp, "primal"), (wa, "adjoint")):
            wv = forms._values(space, wfun.coeffs, sl)
            wg = forms._grads(space, wfun.coeffs, sl)
            # gradient of (w psi): psi grad w + w grad psi
            tg = hats[..., None] * wg[:, :, None, :] + wv[..., None, None] * hgr
            tv = hats * wv[..., None]
            if kind == "primal":
                flux = (a[..., None] * g_u)
                integ = np.einsum("cqd,cqld->cql", flux, tg) - fv[..., None] * tv
                loc += -0.5 * problem.scale * np.einsum("cql,cq->cl", integ, jxw[sl])
            else:
                gdw = np.einsum("cqd,cqld->cql", g_u, tg)
                integ = (a[..., None] * np.einsum("cqd,cqld->cql", g_z, tg)
                         + 2.0 * (a1 * np.einsum("cqd,cqd->cq", g_u, g_z))[..., None] * gdw)
                loc += -0.5 * problem.scale * np.einsum("cql,cq->cl", integ, jxw[sl])
        eta += np.bincount(pu_dofs[sl].ravel(), weights=loc.ravel(),
                           minlength=pu_space.dof_count)

    # goal-derivative half of the adjoint residual, J'(ut)((u2 - ut) psi_i)
    eta += 0.5 * _atoms_pu(goal.derivative_atoms(u_emb), wa, pu_space)
    return redistribute_hanging(mesh, eta)


def _atoms_pu(atoms, w: FeFunction, pu_space: Space):
    """Per-PU-node application of goal derivative atoms to w psi_i."""
    from .space import shape_values
    mesh = pu_space.mesh
    out = np.zeros(pu_space.dof_count)
    for a in atoms:
        if isinstance(a, forms.PointAtom):
            cells, ref = mesh.locate([(a.x, a.y)])
            row = pu_space._row_of[int(cells[0])]
            hat, _ = shape_values(1, ref[0])
            wrow = w.space._row_of[int(cells[0])]
            wvals, _ = shape_values(w.space.order, ref[0])
            wval = float(wvals @ w.coeffs[w.space.cell_dofs[wrow]])
            np.add.at(out, pu_space.cell_dofs[row], a.coef * wval * hat)
        else:
            _, phys, jxw = (forms._goal_quadrature(mesh) if a.rect is None
                            else forms._clipped_quadrature(mesh, a.rect))
            wv = forms._fe_values_at(w, phys)
            b = mesh.cell_boxes()
            xi = 2.0 * (phys[..., 0] - b[:, None, 0]) / (b[:, None, 2] - b[:, None, 0]) - 1.0
            eta_ = 2.0 * (phys[..., 1] - b[:, None, 1]) / (b[:, None, 3] - b[:, None, 1]) - 1.0
            nc, npts = xi.shape
            hat, _ = _shape_tables(1, np.column_stack([xi.ravel(), eta_.ravel()]))
            hat = hat.reshape(nc, npts, 4)
            loc = np.einsum("cp,cpl->cl", jxw * wv, hat)
            out += a.coef * np.bincount(pu_space.cell_dofs.ravel(), weights=loc.ravel(),
                                        minlength=pu_space.dof_count)
    return out


def element_indicators(mesh, node_indicators, element_remainders):
    """Per-cell indicators: shared node magnitudes plus the local remainder.

    eta_K = sum over corner nodes |eta_i| / (#active cells sharing node i)
    plus |R restricted to K|.
    """
    cellverts = mesh.cell_vertices()
    counts = np.bincount(cellverts.ravel(), minlength=len(node_indicators))
    share = np.abs(node_indicators) / np.maximum(counts, 1)
    eta_K = share[cellverts].sum(axis=1)
    if element_remainders is not None:
        eta_K = eta_K + np.abs(element_remainders)
    return eta_K


def estimate(problem, goal, u_tilde, z_tilde, u2, z2, s_points=5,
             localization=True) -> Estimate:
    """Assemble the full estimator record from base and enriched solutions.

    ``u_tilde``/``z_tilde`` live on the base space, ``u2``/``z2`` on the
    enriched space over the same mesh; base functions are embedded first.
    """
    space = u2.space
    if z2.space is not space:
        raise ValueError("u2 and z2 must share the enriched space")
    if u_tilde.space.mesh is not space.mesh:
        raise ValueError("base and enriched spaces must live on the same mesh")
    u_emb = embed(u_tilde, space) if u_tilde.space is not space else u_tilde
    z_emb = embed(z_tilde, space) if z_tilde.space is not space else z_tilde

    wp = FeFunction(space, z2.coeffs - z_emb.coeffs)
    wa = FeFunction(space, u2.coeffs - u_emb.coeffs)
    primal = -0.5 * forms.apply_semilinear(problem, space, u_emb, wp)
    adjoint = 0.5 * (goal.derivative_apply(u_emb, wa)
                     - forms.apply_derivative(problem, space, u_emb, wa, z_emb))
    eta_k = -forms.apply_semilinear(problem, space, u_emb, z_emb)
    r_cells = remainder_quadrature(problem, goal, u_emb, z_emb, u2, z2,
                                   s_points=s_points, per_cell=True)
    eta_R = float(np.sum(r_cells))
    eta_h2 = primal + adjoint
    node_ind = None
    elem_ind = None
    if localization:
        pu = u_tilde.space if u_tilde.space.order == 1 else build_space(space.mesh, 1)
        node_ind = localize_pu(problem, goal, u_emb, z_emb, u2, z2, pu)
        elem_ind = element_indicators(space.mesh, node_ind, r_cells)
    return Estimate(eta2=eta_h2 + eta_k + eta_R, eta_h2=eta_h2, eta_k=eta_k,
                    eta_R=eta_R, primal_part=primal, adjoint_part=adjoint,
                    node_indicators=node_ind, element_indicators=elem_ind,
                    element_remainders=r_cells)


def diagnostics(est: Estimate, J_ref, J_tilde, J_enriched) -> SaturationReport:
    """Effectivity indices and measured saturation quantities.

    With no reference value (J_ref None) or a vanishing reference error all
    indices are reported as NaN sentinels.
    """
    gamma_hat = abs(est.eta_k) + abs(est.eta_R)
    if J_ref is None:
        return SaturationReport(*([np.nan] * 5), gamma_hat=gamma_hat)
    err = abs(J_ref - J_tilde)
    if err == 0.0:
        return SaturationReport(*([np.nan] * 5), gamma_hat=gamma_hat)
    gamma_hat = gamma_hat + abs(J_ref - J_enriched)
    return SaturationReport(
        I_eff=abs(est.eta2) / err,
        I_eff_gamma=abs(est.eta_h2) / err,
        I_eff_primal=abs(2.0 * est.primal_part) / err,
        I_eff_adjoint=abs(2.0 * est.adjoint_part) / err,
        b_h_hat=abs(J_ref - J_enriched) / err,
        gamma_hat=gamma_hat,
    )
