"""Continuous Q1/Q2 finite element spaces on 1-irregular quadrilateral meshes.

Degrees of freedom sit at tensor-product Lagrange nodes (vertices for Q1;
vertices, edge midpoints and centers for Q2) and are numbered
lexicographically by coordinate.  Hanging nodes are eliminated through
constraint rows: a hanging Q1 vertex is the average of the coarse edge
endpoints, and hanging Q2 edge nodes carry the quadratic trace of the coarse
edge.  Spaces and functions are immutable once built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, WEST, EAST, SOUTH, NORTH, _OPPOSITE, _coord


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss rule on the reference square [-1, 1]^2."""

    points: np.ndarray   # (nq, 2)
    weights: np.ndarray  # (nq,)
    exactness: int       # exact per-axis polynomial degree

    @property
    def n(self):
        return len(self.weights)


def gauss_rule(points_per_axis: int) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(points_per_axis)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return QuadratureRule(points=np.column_stack([X.ravel(), Y.ravel()]),
                          weights=W.ravel(), exactness=2 * points_per_axis - 1)


def _shape_1d(order, t):
    """Values and derivatives of the 1D Lagrange basis at points t."""
    t = np.asarray(t, dtype=float)
    if order == 1:
        vals = np.stack([0.5 * (1.0 - t), 0.5 * (1.0 + t)], axis=-1)
        grads = np.stack([np.full_like(t, -0.5), np.full_like(t, 0.5)], axis=-1)
    elif order == 2:
        vals = np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)
        grads = np.stack([t - 0.5, -2.0 * t, t + 0.5], axis=-1)
    else:
        raise ValueError("order must be 1 or 2")
    return vals, grads


def shape_values(order, point):
    """Local basis values and reference gradients at one reference point.

    Local nodes are in tensor order, x fastest: local = iy * (order+1) + ix.
    """
    xi, eta = float(point[0]), float(point[1])
    vx, gx = _shape_1d(order, np.array([xi]))
    vy, gy = _shape_1d(order, np.array([eta]))
    vals = (vy[0][:, None] * vx[0][None, :]).ravel()
    gxs = (vy[0][:, None] * gx[0][None, :]).ravel()
    gys = (gy[0][:, None] * vx[0][None, :]).ravel()
    return vals, np.column_stack([gxs, gys])


def _shape_tables(order, ref_points):
    """Basis values/gradients at many reference points: (np, nloc) and (np, nloc, 2)."""
    vx, gx = _shape_1d(order, ref_points[:, 0])
    vy, gy = _shape_1d(order, ref_points[:, 1])
    vals = (vy[:, :, None] * vx[:, None, :]).reshape(len(ref_points), -1)
    gxs = (vy[:, :, None] * gx[:, None, :]).reshape(len(ref_points), -1)
    gys = (gy[:, :, None] * vx[:, None, :]).reshape(len(ref_points), -1)
    return vals, np.stack([gxs, gys], axis=-1)


# Local dof indices along each cell side, ordered along increasing coordinate.
_SIDE_LOCALS = {
    1: {WEST: (0, 2), EAST: (1, 3), SOUTH: (0, 1), NORTH: (2, 3)},
    2: {WEST: (0, 3, 6), EAST: (2, 5, 8), SOUTH: (0, 1, 2), NORTH: (6, 7, 8)},
}


class Space:
    """Global Q1 or Q2 space with hanging-node constraints and Dirichlet masks."""

    def __init__(self, mesh: Mesh, order: int, quad_points=None):
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        self.mesh = mesh
        self.order = order
        self.quad = gauss_rule(quad_points if quad_points is not None else (3 if order == 1 else 5))
        self._build_nodes()
        self._build_constraints()
        self._build_boundary()
        self._cache = {}

    # -- construction -------------------------------------------------------

    def _build_nodes(self):
        mesh, order = self.mesh, self.order
        nn = order + 1
        ids = mesh.active_ids
        root = np.asarray(mesh._root, dtype=np.int64)[ids]
        lev = np.asarray(mesh._level, dtype=np.int64)[ids]
        ix = np.asarray(mesh._ix, dtype=np.int64)[ids]
        iy = np.asarray(mesh._iy, dtype=np.int64)[ids]
        rects = np.asarray(mesh._rects)
        # dyadic parameters of the 1D node positions inside the root rectangle
        if order == 1:
            den = (1 << lev).astype(float)
            tx = (ix[:, None] + np.arange(2)[None, :]) / den[:, None]
            ty = (iy[:, None] + np.arange(2)[None, :]) / den[:, None]
        else:
            den = (1 << (lev + 1)).astype(float)
            tx = (2 * ix[:, None] + np.arange(3)[None, :]) / den[:, None]
            ty = (2 * iy[:, None] + np.arange(3)[None, :]) / den[:, None]
        rx0, ry0, rx1, ry1 = (rects[root, k][:, None] for k in range(4))
        xs = rx0 * (1.0 - tx) + rx1 * tx   # (nc, nn)
        ys = ry0 * (1.0 - ty) + ry1 * ty
        # tensor order, x fastest
        X = np.broadcast_to(xs[:, None, :], (len(ids), nn, nn))
        Y = np.broadcast_to(ys[:, :, None], (len(ids), nn, nn))
        keys = (X + 1j * Y).reshape(len(ids), nn * nn)
        uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
        self.node_coords = np.column_stack([uniq.real, uniq.imag])
        self.cell_dofs = inverse.reshape(len(ids), nn * nn).astype(np.int64)
        self.dof_count = len(uniq)
        self._row_of = {int(c): k for k, c in enumerate(ids)}

    def _build_constraints(self):
        order = self.order
        raw = {}
        side_locals = _SIDE_LOCALS[order]
        for h in self.mesh.hanging_interfaces():
            lo_fine, hi_fine = (self._row_of[c] for c in h["fine_cells"])
            coarse = self._row_of[h["coarse_cell"]]
            fside = h["fine_side"]
            cl = side_locals[_OPPOSITE[fside]]
            if order == 1:
                a, b = (int(self.cell_dofs[coarse, l]) for l in cl)
                mid = int(self.cell_dofs[lo_fine, side_locals[fside][1]])
                raw[mid] = ((a, 0.5), (b, 0.5))
            else:
                a, m, b = (int(self.cell_dofs[coarse, l]) for l in cl)
                lo_mid = int(self.cell_dofs[lo_fine, side_locals[fside][1]])
                hi_mid = int(self.cell_dofs[hi_fine, side_locals[fside][1]])
                # quadratic trace of the coarse edge at parameters 1/4 and 3/4
                raw[lo_mid] = ((a, 0.375), (m, 0.75), (b, -0.125))
                raw[hi_mid] = ((a, -0.125), (m, 0.75), (b, 0.375))
        # resolve master chains (a master may hang on a coarser edge itself)
        closed = {}
        for dof, combo in raw.items():
            for _ in range(64):
                if not any(m in raw for m, _w in combo):
                    break
                expanded = []
                for m, w in combo:
                    if m in raw:
                        expanded.extend((mm, w * ww) for mm, ww in raw[m])
                    else:
                        expanded.append((m, w))
                acc = {}
                for m, w in expanded:
                    acc[m] = acc.get(m, 0.0) + w
                combo = tuple(sorted(acc.items()))
            else:
                raise AssertionError("constraint chain did not close")
            closed[dof] = combo
        self.constraints = closed

    def _build_boundary(self):
        side_locals = _SIDE_LOCALS[self.order]
        dofs = set()
        for cell, side in self.mesh.boundary_edges():
            row = self._row_of[cell]
            for l in side_locals[side]:
                dofs.add(int(self.cell_dofs[row, l]))
        overlap = dofs & set(self.constraints)
        if overlap:
            raise AssertionError(f"constrained dofs {sorted(overlap)} on the boundary")
        self.boundary_dofs = np.array(sorted(dofs), dtype=np.int64)

    # -- derived structures ---------------------------------------------------

    @property
    def n_cells(self):
        return len(self.cell_dofs)

    def constraint_matrix(self):
        """Sparse map from master values to the full conforming vector."""
        if "C" not in self._cache:
            n = self.dof_count
            rows, cols, vals = [], [], []
            for i in range(n):
                combo = self.constraints.get(i)
                if combo is None:
                    rows.append(i)
                    cols.append(i)
                    vals.append(1.0)
                else:
                    for m, w in combo:
                        rows.append(i)
                        cols.append(m)
                        vals.append(w)
            self._cache["C"] = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self._cache["C"]

    @property
    def free_dofs(self):
        """Mask of unknowns: neither constrained nor Dirichlet."""
        if "free" not in self._cache:
            free = np.ones(self.dof_count, dtype=bool)
            free[self.boundary_dofs] = False
            if self.constraints:
                free[list(self.constraints)] = False
            self._cache["free"] = free
        return self._cache["free"]

    def distribute(self, coeffs):
        """Return coefficients with constrained entries set from their masters."""
        return self.constraint_matrix().dot(coeffs)

    def condense(self, raw_vector):
        """Accumulate a raw assembled vector onto the conforming basis."""
        return self.constraint_matrix().T.dot(raw_vector)

    def condense_matrix(self, raw_matrix):
        C = self.constraint_matrix()
        return (C.T @ raw_matrix @ C).tocsr()

    # -- assembly geometry ------------------------------------------------------

    def shape_tables(self):
        """Basis values/gradients at the space's quadrature points."""
        if "tables" not in self._cache:
            self._cache["tables"] = _shape_tables(self.order, self.quad.points)
        return self._cache["tables"]

    def geometry(self):
        """Per-cell (hx, hy, jxw, grad scale) arrays for assembly."""
        if "geom" not in self._cache:
            b = self.mesh.cell_boxes()
            hx = b[:, 2] - b[:, 0]
            hy = b[:, 3] - b[:, 1]
            jxw = np.outer(hx * hy / 4.0, self.quad.weights)
            scale = np.column_stack([2.0 / hx, 2.0 / hy])
            self._cache["geom"] = (hx, hy, jxw, scale)
        return self._cache["geom"]

    def quad_points_phys(self):
        """(n_cells, nq, 2) physical coordinates of the quadrature points."""
        if "physqp" not in self._cache:
            b = self.mesh.cell_boxes()
            qp = self.quad.points
            x = b[:, 0, None] + (qp[None, :, 0] + 1.0) * 0.5 * (b[:, 2] - b[:, 0])[:, None]
            y = b[:, 1, None] + (qp[None, :, 1] + 1.0) * 0.5 * (b[:, 3] - b[:, 1])[:, None]
            self._cache["physqp"] = np.stack([x, y], axis=-1)
        return self._cache["physqp"]


@dataclass(frozen=True)
class FeFunction:
    """A finite element function: a space plus its coefficient vector."""

    space: Space
    coeffs: np.ndarray

    def __post_init__(self):
        if len(self.coeffs) != self.space.dof_count:
            raise ValueError("coefficient vector length does not match the space")


def fe_function(space, coeffs):
    """Wrap coefficients as a conforming FeFunction (constraints applied)."""
    return FeFunction(space, space.distribute(np.asarray(coeffs, dtype=float)))


def build_space(mesh: Mesh, order: int, quad_points=None) -> Space:
    return Space(mesh, order, quad_points)


def zero_function(space: Space) -> FeFunction:
    return FeFunction(space, np.zeros(space.dof_count))


def _call_pointwise(g, x, y):
    if callable(g):
        out = g(x, y)
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(x)).copy()
    return np.full(np.shape(x), float(g))


def interpolate(space: Space, g) -> FeFunction:
    """Nodal interpolation of g(x, y); constrained dofs are set consistently."""
    xy = space.node_coords
    vals = _call_pointwise(g, xy[:, 0], xy[:, 1])
    return FeFunction(space, space.distribute(vals))


def evaluate(f: FeFunction, point):
    """Value and gradient of f at one physical point inside the domain."""
    cells, ref = f.space.mesh.locate([point])
    return evaluate_in_cell(f, int(cells[0]), ref[0])


def evaluate_in_cell(f: FeFunction, cell_id: int, ref_point):
    """Evaluate inside a specific active cell at a reference point."""
    space = f.space
    row = space._row_of[cell_id]
    vals, grads = shape_values(space.order, ref_point)
    local = f.coeffs[space.cell_dofs[row]]
    x0, y0, x1, y1 = space.mesh.cell_box(cell_id)
    g = grads.T @ local
    return float(vals @ local), np.array([2.0 / (x1 - x0) * g[0], 2.0 / (y1 - y0) * g[1]])


def evaluate_values(f: FeFunction, points):
    """Vectorized point evaluation (values only)."""
    space = f.space
    cells, ref = space.mesh.locate(points)
    rows = np.array([space._row_of[int(c)] for c in cells], dtype=np.int64)
    vals, _ = _shape_tables(space.order, ref)
    local = f.coeffs[space.cell_dofs[rows]]
    return np.einsum("pl,pl->p", vals, local)


def embed(f: FeFunction, target: Space) -> FeFunction:
    """Inject a function into a richer space on the same mesh (exact for Q1 in Q2)."""
    src = f.space
    if target.mesh is not src.mesh:
        raise ValueError("embed requires both spaces on the same mesh")
    if target.order < src.order:
        raise ValueError("embed target must not be coarser than the source space")
    nn = target.order + 1
    t1 = np.linspace(-1.0, 1.0, nn)
    X, Y = np.meshgrid(t1, t1, indexing="xy")
    ref_nodes = np.column_stack([X.ravel(), Y.ravel()])  # tensor order, x fastest
    vals, _ = _shape_tables(src.order, ref_nodes)        # (nloc_t, nloc_s)
    local_t = f.coeffs[src.cell_dofs] @ vals.T           # (nc, nloc_t)
    coeffs = np.zeros(target.dof_count)
    coeffs[target.cell_dofs.ravel()] = local_t.ravel()
    return FeFunction(target, target.distribute(coeffs))


def transfer(f: FeFunction, target: Space) -> FeFunction:
    """Evaluate a function at the nodes of a space on another (finer) mesh."""
    vals = evaluate_values(f, target.node_coords)
    return FeFunction(target, target.distribute(vals))


def free_inf_norm(space: Space, vec) -> float:
    """Max-norm over the unconstrained, non-Dirichlet coefficients."""
    sub = vec[space.free_dofs]
    return float(np.max(np.abs(sub))) if len(sub) else 0.0


def dump_function_csv(f: FeFunction, path):
    """Write ``dof_id,x,y,value`` rows for plotting."""
    xy = f.space.node_coords
    with open(path, "w") as fh:
        fh.write("dof_id,x,y,value\n")
        for i in range(f.space.dof_count):
            fh.write(f"{i},{xy[i, 0]:.17g},{xy[i, 1]:.17g},{f.coeffs[i]:.17g}\n")
