"""The regularized p-Laplace semilinear form, its directional derivatives up
to third order, the manufactured benchmark source, and the goal-functional
catalog.

The operator is A(u)(v) = int a(|grad u|^2) grad u . grad v - int f v with
coefficient a(t) = (eps^2 + t)^((p-2)/2).  Derivative forms are chain-rule
expansions assembled cellwise by Gauss quadrature; they are exercised against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .space import FeFunction, Space, _shape_tables

_CHUNK = 16384


@dataclass(frozen=True)
class Problem:
    """Regularized p-Laplace data: exponent, regularization, source, boundary value.

    ``f`` and ``dirichlet`` are pointwise callables f(x, y) accepting numpy
    arrays (constants are promoted).  ``scale`` multiplies the whole residual;
    it exists so affine-invariance properties of the solver can be checked.
    """

    p: float
    eps: float
    f: object = 0.0
    dirichlet: object = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("exponent p must be > 1")
        if not self.eps > 0:
            raise ValueError("regularization eps must be > 0")


def coefficient_derivatives(problem: Problem, t):
    """a(t) = (eps^2 + t)^((p-2)/2) and its first three derivatives in t.

    For p = 4 this reduces to a' = 1 and a'' = a''' = 0; for p = 2 the
    coefficient is identically 1.
    """
    t = np.asarray(t, dtype=float)
    p, e2 = problem.p, problem.eps ** 2
    base = e2 + t
    c1 = 0.5 * (p - 2.0)
    c2 = c1 * 0.5 * (p - 4.0)
    c3 = c2 * 0.5 * (p - 6.0)
    a = base ** c1
    a1 = c1 * base ** (c1 - 1.0) if p != 2.0 else np.zeros_like(t)
    a2 = c2 * base ** (c1 - 2.0) if p not in (2.0, 4.0) else np.zeros_like(t)
    a3 = c3 * base ** (c1 - 3.0) if p not in (2.0, 4.0, 6.0) else np.zeros_like(t)
    return a, a1, a2, a3


def _as_field(g):
    if callable(g):
        return g
    return lambda x, y, _v=float(g): np.full(np.shape(x), _v)


def _chunks(n):
    for s in range(0, n, _CHUNK):
        yield slice(s, min(s + _CHUNK, n))


def _local_coeffs(space, coeffs, sl):
    return coeffs[space.cell_dofs[sl]]


def _grads(space, coeffs, sl):
    """Gradients of a function at the quadrature points of a cell chunk."""
    _, ref_grads = space.shape_tables()
    _, _, _, scale = space.geometry()
    local = _local_coeffs(space, coeffs, sl)
    g = np.einsum("qld,cl->cqd", ref_grads, local)
    return g * scale[sl, None, :]


def _values(space, coeffs, sl):
    ref_vals, _ = space.shape_tables()
    return np.einsum("ql,cl->cq", ref_vals, _local_coeffs(space, coeffs, sl))


def semilinear_form(problem: Problem, space: Space, u: FeFunction):
    """Raw residual vector r_i = A(u)(phi_i) over the nodal basis."""
    ref_vals, ref_grads = space.shape_tables()
    _, _, jxw, scale = space.geometry()
    phys = space.quad_points_phys()
    ffun = _as_field(problem.f)
    out = np.zeros(space.dof_count)
    for sl in _chunks(space.n_cells):
        g = _grads(space, u.coeffs, sl)
        a, _, _, _ = coefficient_derivatives(problem, np.einsum("cqd,cqd->cq", g, g))
        flux = a[:, :, None] * g
        r_loc = np.einsum("cqd,qld,cd,cq->cl", flux, ref_grads, scale[sl], jxw[sl],
                          optimize=True)
        fv = ffun(phys[sl, :, 0], phys[sl, :, 1])
        r_loc -= np.einsum("cq,ql,cq->cl", fv, ref_vals, jxw[sl], optimize=True)
        out += np.bincount(space.cell_dofs[sl].ravel(),
                           weights=(problem.scale * r_loc).ravel(),
                           minlength=space.dof_count)
    return out


def derivative_form(problem: Problem, space: Space, u: FeFunction):
    """Raw Jacobian matrix K_ij = A'(u)(phi_j, phi_i) as sparse CSR."""
    _, ref_grads = space.shape_tables()
    _, _, jxw, scale = space.geometry()
    nloc = space.cell_dofs.shape[1]
    rows_all, cols_all, vals_all = [], [], []
    for sl in _chunks(space.n_cells):
        g = _grads(space, u.coeffs, sl)
        a, a1, _, _ = coefficient_derivatives(problem, np.einsum("cqd,cqd->cq", g, g))
        gphi = ref_grads[None, :, :, :] * scale[sl, None, None, :]   # (c, q, l, d)
        gdot = np.einsum("cqld,cqd->cql", gphi, g)
        k_loc = np.einsum("cq,cqid,cqjd->cij", jxw[sl] * a, gphi, gphi, optimize=True)
        k_loc += np.einsum("cq,cqi,cqj->cij", jxw[sl] * 2.0 * a1, gdot, gdot,
                           optimize=True)
        k_loc *= problem.scale
        dofs = space.cell_dofs[sl]
        rows_all.append(np.repeat(dofs, nloc, axis=1).ravel())
        cols_all.append(np.tile(dofs, (1, nloc)).ravel())
        vals_all.append(k_loc.ravel())
    mat = sp.coo_matrix((np.concatenate(vals_all),
                         (np.concatenate(rows_all), np.concatenate(cols_all))),
                        shape=(space.dof_count, space.dof_count))
    return mat.tocsr()


def apply_semilinear(problem, space, u, w, per_cell=False):
    """A(u)(w) for finite element functions, optionally as per-cell sums."""
    _, _, jxw, _ = space.geometry()
    phys = space.quad_points_phys()
    ffun = _as_field(problem.f)
    acc = np.zeros(space.n_cells)
    for sl in _chunks(space.n_cells):
        g = _grads(space, u.coeffs, sl)
        a, _, _, _ = coefficient_derivatives(problem, np.einsum("cqd,cqd->cq", g, g))
        gw = _grads(space, w.coeffs, sl)
        integ = a * np.einsum("cqd,cqd->cq", g, gw)
        integ -= ffun(phys[sl, :, 0], phys[sl, :, 1]) * _values(space, w.coeffs, sl)
        acc[sl] = problem.scale * np.einsum("cq,cq->c", integ, jxw[sl])
    return acc if per_cell else float(acc.sum())


def apply_derivative(problem, space, u, phi, v, per_cell=False):
    """A'(u)(phi, v) = int a grad phi . grad v + 2 a' (g.grad phi)(g.grad v)."""
    _, _, jxw, _ = space.geometry()
    acc = np.zeros(space.n_cells)
    for sl in _chunks(space.n_cells):
        g = _grads(space, u.coeffs, sl)
        a, a1, _, _ = coefficient_derivatives(problem, np.einsum("cqd,cqd->cq", g, g))
        gp = _grads(space, phi.coeffs, sl)
        gv = _grads(space, v.coeffs, sl)
        integ = a * np.einsum("cqd,cqd->cq", gp, gv)
        integ += 2.0 * a1 * np.einsum("cqd,cqd->cq", g, gp) * np.einsum("cqd,cqd->cq", g, gv)
        acc[sl] = problem.scale * np.einsum("cq,cq->c", integ, jxw[sl])
    return acc if per_cell else float(acc.sum())


def second_form(problem, space, u, phi, psi, v, per_cell=False):
    """A''(u)(phi, psi, v), fully symmetric in its three direction arguments."""
    _, _, jxw, _ = space.geometry()
    acc = np.zeros(space.n_cells)
    for sl in _chunks(space.n_cells):
        g = _grads(space, u.coeffs, sl)
        _, a1, a2, _ = coefficient_derivatives(problem, np.einsum("cqd,cqd->cq", g, g))
        gp = _grads(space, phi.coeffs, sl)
        gs = _grads(space, psi.coeffs, sl)
        gv = _grads(space, v.coeffs, sl)
        dot = lambda x, y: np.einsum("cqd,cqd->cq", x, y)
        integ = 2.0 * a1 * (dot(gp, gs) * dot(g, gv) + dot(g, gp) * dot(gs, gv)
                            + dot(g, gs) * dot(gp, gv))
        integ += 4.0 * a2 * dot(g, gp) * dot(g, gs) * dot(g, gv)
        acc[sl] = problem.scale * np.einsum("cq,cq->c", integ, jxw[sl])
    return acc if per_cell else float(acc.sum())


def third_form(problem, space, u, phi, psi, chi, v, per_cell=False):
    """A'''(u)(phi, psi, chi, v), fully symmetric in the direction arguments."""
    _, _, jxw, _ = space.geometry()
    acc = np.zeros(space.n_cells)
    for sl in _chunks(space.n_cells):
        g = _grads(space, u.coeffs, sl)
        _, a1, a2, a3 = coefficient_derivatives(problem, np.einsum("cqd,cqd->cq", g, g))
        gp = _grads(space, phi.coeffs, sl)
        gs = _grads(space, psi.coeffs, sl)
        gc = _grads(space, chi.coeffs, sl)
        gv = _grads(space, v.coeffs, sl)
        dot = lambda x, y: np.einsum("cqd,cqd->cq", x, y)
        integ = 2.0 * a1 * (dot(gc, gs) * dot(gp, gv) + dot(gs, gp) * dot(gc, gv)
                            + dot(gc, gp) * dot(gs, gv))
        integ += 4.0 * a2 * (
            dot(g, gc) * (dot(gp, gs) * dot(g, gv) + dot(g, gp) * dot(gs, gv)
                          + dot(g, gs) * dot(gp, gv))
            + dot(gc, gs) * dot(g, gp) * dot(g, gv)
            + dot(gc, gp) * dot(g, gs) * dot(g, gv)
            + dot(g, gs) * dot(g, gp) * dot(gc, gv))
        integ += 8.0 * a3 * dot(g, gc) * dot(g, gs) * dot(g, gp) * dot(g, gv)
        acc[sl] = problem.scale * np.einsum("cq,cq->c", integ, jxw[sl])
    return acc if per_cell else float(acc.sum())


# -- manufactured benchmark ---------------------------------------------------

def manufactured_solution():
    """Closed-form u(x, y) = sqrt(x^2 + y^2) (x^2 - 1)(y^2 - 1) with gradient
    and Hessian.  The gradient is singular at the origin; the radius is
    clamped at 1e-14 there."""

    def value(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.sqrt(x * x + y * y) * (x * x - 1.0) * (y * y - 1.0)

    def gradient(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r = np.maximum(np.sqrt(x * x + y * y), 1e-14)
        g = x * x - 1.0
        k = y * y - 1.0
        ux = (x / r) * g * k + 2.0 * x * r * k
        uy = (y / r) * g * k + 2.0 * y * r * g
        return ux, uy

    def hessian(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r = np.maximum(np.sqrt(x * x + y * y), 1e-14)
        g = x * x - 1.0
        k = y * y - 1.0
        r3 = r ** 3
        uxx = (y * y / r3) * g * k + (4.0 * x * x / r + 2.0 * r) * k
        uyy = (x * x / r3) * g * k + (4.0 * y * y / r + 2.0 * r) * g
        uxy = -(x * y / r3) * g * k + (2.0 * x * y / r) * (g + k) + 4.0 * x * y * r
        return uxx, uxy, uyy

    return value, gradient, hessian


def manufactured_source(problem: Problem):
    """Source f = -div(a(|grad u|^2) grad u) for the closed-form benchmark solution."""
    _, gradient, hessian = manufactured_solution()

    def f(x, y):
        ux, uy = gradient(x, y)
        uxx, uxy, uyy = hessian(x, y)
        t = ux * ux + uy * uy
        a, a1, _, _ = coefficient_derivatives(problem, t)
        hgg = ux * ux * uxx + 2.0 * ux * uy * uxy + uy * uy * uyy
        return -a * (uxx + uyy) - 2.0 * a1 * hgg

    return f


def example1_problem(p=4.0, eps=1e-10):
    prob = Problem(p=p, eps=eps)
    return Problem(p=p, eps=eps, f=manufactured_source(prob), dirichlet=0.0)


# -- goal functionals ----------------------------------------------------------

@dataclass(frozen=True)
class PointAtom:
    """coef times a point evaluation delta_{(x, y)}."""
    x: float
    y: float
    coef: float


@dataclass(frozen=True)
class IntegralAtom:
    """coef times integration over the domain or an axis-aligned sub-rectangle."""
    coef: float
    rect: tuple = None  # (x0, y0, x1, y1) or None for the whole domain


_GOAL_QUAD_POINTS = 5


def _goal_quadrature(mesh):
    """Fixed 5x5 Gauss data on the active cells, shared by all goal evaluations."""
    key = "goal_quad"
    if key not in mesh._cache:
        from .space import gauss_rule
        q = gauss_rule(_GOAL_QUAD_POINTS)
        b = mesh.cell_boxes()
        x = b[:, 0, None] + (q.points[None, :, 0] + 1.0) * 0.5 * (b[:, 2] - b[:, 0])[:, None]
        y = b[:, 1, None] + (q.points[None, :, 1] + 1.0) * 0.5 * (b[:, 3] - b[:, 1])[:, None]
        jxw = np.outer((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) / 4.0, q.weights)
        mesh._cache[key] = (q, np.stack([x, y], axis=-1), jxw)
    return mesh._cache[key]


def _clipped_quadrature(mesh, rect):
    """Gauss data on cell intersections with a rectangle (exact for polynomials)."""
    key = ("goal_quad_clip", rect)
    if key not in mesh._cache:
        from .space import gauss_rule
        q = gauss_rule(_GOAL_QUAD_POINTS)
        b = mesh.cell_boxes()
        x0 = np.maximum(b[:, 0], rect[0])
        y0 = np.maximum(b[:, 1], rect[1])
        x1 = np.minimum(b[:, 2], rect[2])
        y1 = np.minimum(b[:, 3], rect[3])
        wx = np.maximum(x1 - x0, 0.0)
        wy = np.maximum(y1 - y0, 0.0)
        x = x0[:, None] + (q.points[None, :, 0] + 1.0) * 0.5 * wx[:, None]
        y = y0[:, None] + (q.points[None, :, 1] + 1.0) * 0.5 * wy[:, None]
        jxw = np.outer(wx * wy / 4.0, q.weights)
        mesh._cache[key] = (q, np.stack([x, y], axis=-1), jxw)
    return mesh._cache[key]


def _fe_values_at(f: FeFunction, phys):
    """Values of a function at per-cell point sets phys (nc, np, 2)."""
    space = f.space
    b = space.mesh.cell_boxes()
    xi = 2.0 * (phys[..., 0] - b[:, None, 0]) / (b[:, None, 2] - b[:, None, 0]) - 1.0
    eta = 2.0 * (phys[..., 1] - b[:, None, 1]) / (b[:, None, 3] - b[:, None, 1]) - 1.0
    nc, npts = xi.shape
    vals, _ = _shape_tables(space.order, np.column_stack([xi.ravel(), eta.ravel()]))
    vals = vals.reshape(nc, npts, -1)
    return np.einsum("cpl,cl->cp", vals, f.coeffs[space.cell_dofs])


def _integrate_fe(f: FeFunction, rect=None):
    mesh = f.space.mesh
    _, phys, jxw = _goal_quadrature(mesh) if rect is None else _clipped_quadrature(mesh, rect)
    return float(np.sum(_fe_values_at(f, phys) * jxw))


def atoms_apply(atoms, w: FeFunction) -> float:
    """Apply a list of derivative atoms to a finite element function."""
    from .space import evaluate
    total = 0.0
    for a in atoms:
        if isinstance(a, PointAtom):
            val, _ = evaluate(w, (a.x, a.y))
            total += a.coef * val
        else:
            total += a.coef * _integrate_fe(w, a.rect)
    return total


def atoms_vector(atoms, space: Space) -> np.ndarray:
    """Raw vector of the atoms applied to every nodal basis function."""
    from .space import shape_values
    out = np.zeros(space.dof_count)
    for a in atoms:
        if isinstance(a, PointAtom):
            cells, ref = space.mesh.locate([(a.x, a.y)])
            row = space._row_of[int(cells[0])]
            vals, _ = shape_values(space.order, ref[0])
            np.add.at(out, space.cell_dofs[row], a.coef * vals)
        else:
            mesh = space.mesh
            _, phys, jxw = (_goal_quadrature(mesh) if a.rect is None
                            else _clipped_quadrature(mesh, a.rect))
            b = mesh.cell_boxes()
            xi = 2.0 * (phys[..., 0] - b[:, None, 0]) / (b[:, None, 2] - b[:, None, 0]) - 1.0
            eta = 2.0 * (phys[..., 1] - b[:, None, 1]) / (b[:, None, 3] - b[:, None, 1]) - 1.0
            nc, npts = xi.shape
            vals, _ = _shape_tables(space.order, np.column_stack([xi.ravel(), eta.ravel()]))
            vals = vals.reshape(nc, npts, -1)
            loc = np.einsum("cp,cpl->cl", jxw, vals)
            out += a.coef * np.bincount(space.cell_dofs.ravel(), weights=loc.ravel(),
                                        minlength=space.dof_count)
    return out


class Goal:
    """A goal functional with directional derivatives up to third order.

    All shipped goals have an identically vanishing third derivative, which
    the estimator checks structurally via ``third_is_zero``.
    """

    name = "goal"
    third_is_zero = True

    def value(self, u: FeFunction) -> float:
        raise NotImplementedError

    def derivative_atoms(self, u: FeFunction):
        """J'(u) as a list of point/integral atoms."""
        raise NotImplementedError

    def derivative_apply(self, u, w) -> float:
        return atoms_apply(self.derivative_atoms(u), w)

    def derivative_vector(self, u, space) -> np.ndarray:
        return atoms_vector(self.derivative_atoms(u), space)

    def second(self, u, phi, psi) -> float:
        raise NotImplementedError

    def third(self, u, phi, psi, chi) -> float:
        return 0.0


@dataclass(frozen=True)
class PointValueGoal(Goal):
    """J(u) = u(x0)."""

    x: float
    y: float
    name: str = "point_value"

    def value(self, u):
        from .space import evaluate
        val, _ = evaluate(u, (self.x, self.y))
        return val

    def derivative_atoms(self, u):
        return (PointAtom(self.x, self.y, 1.0),)

    def second(self, u, phi, psi):
        return 0.0


@dataclass(frozen=True)
class ProductPointGoal(Goal):
    """J(u) = (1 + u(a)) (1 + u(b))."""

    a: tuple
    b: tuple
    name: str = "product_of_point_values"

    def value(self, u):
        from .space import evaluate
        ua, _ = evaluate(u, self.a)
        ub, _ = evaluate(u, self.b)
        return (1.0 + ua) * (1.0 + ub)

    def derivative_atoms(self, u):
        from .space import evaluate
        ua, _ = evaluate(u, self.a)
        ub, _ = evaluate(u, self.b)
        return (PointAtom(self.a[0], self.a[1], 1.0 + ub),
                PointAtom(self.b[0], self.b[1], 1.0 + ua))

    def second(self, u, phi, psi):
        from .space import evaluate
        pa, _ = evaluate(phi, self.a)
        pb, _ = evaluate(phi, self.b)
        sa, _ = evaluate(psi, self.a)
        sb, _ = evaluate(psi, self.b)
        return pa * sb + sa * pb


@dataclass(frozen=True)
class SquaredMeanDeviationGoal(Goal):
    """J(u) = m(u)^2 with m(u) = int_Omega u - |Omega| u(c)."""

    c: tuple
    name: str = "squared_mean_deviation"

    def _mean_atoms(self, mesh):
        return (IntegralAtom(1.0), PointAtom(self.c[0], self.c[1], -mesh.domain_area()))

    def _m(self, w):
        return atoms_apply(self._mean_atoms(w.space.mesh), w)

    def value(self, u):
        return self._m(u) ** 2

    def derivative_atoms(self, u):
        mu = self._m(u)
        area = u.space.mesh.domain_area()
        return (IntegralAtom(2.0 * mu), PointAtom(self.c[0], self.c[1], -2.0 * mu * area))

    def second(self, u, phi, psi):
        return 2.0 * self._m(phi) * self._m(psi)


@dataclass(frozen=True)
class SubdomainIntegralGoal(Goal):
    """J(u) = int_S u over an axis-aligned rectangle S."""

    rect: tuple
    name: str = "subdomain_integral"

    def value(self, u):
        return _integrate_fe(u, self.rect)

    def derivative_atoms(self, u):
        return (IntegralAtom(1.0, self.rect),)

    def second(self, u, phi, psi):
        return 0.0


def goal_value(goal, u):
    return goal.value(u)


def goal_derivative(goal, u, phi):
    return goal.derivative_apply(u, phi)


def goal_second(goal, u, phi, psi):
    return goal.second(u, phi, psi)
