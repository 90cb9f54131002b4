"""Hierarchical quadrilateral meshes with 1-irregular adaptive refinement.

A mesh is a forest of quadtrees, one tree per axis-aligned root rectangle.
Refinement quadrisects leaf cells; closure refinement keeps the mesh
1-irregular (adjacent leaves differ by at most one level), so every edge
hosts at most one hanging node and that node sits at the edge midpoint.

Meshes are immutable after construction: ``refine`` returns a new mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for overlapping, disconnected or incompatible domain rectangles."""


# Cell-local side indices and (dx, dy) steps towards the neighbor.
WEST, EAST, SOUTH, NORTH = 0, 1, 2, 3
_SIDE_STEP = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OPPOSITE = (EAST, WEST, NORTH, SOUTH)

# Edge intervals are keyed on a fixed dyadic integer grid, which caps the
# refinement depth but makes all interval arithmetic exact.
_SCALE_BITS = 40
_FULL = 1 << _SCALE_BITS


@dataclass(frozen=True)
class DomainSpec:
    """Union of axis-aligned rectangles given as (x0, y0, x1, y1) corners.

    Two rectangles may touch in a single corner point or share a complete
    edge of both; partial edge overlap or interior overlap is rejected.
    The union must be edge-connected.
    """

    cells: tuple

    def __init__(self, cells):
        object.__setattr__(self, "cells", tuple(tuple(float(v) for v in c) for c in cells))
        for c in self.cells:
            if len(c) != 4 or not (c[0] < c[2] and c[1] < c[3]):
                raise GeometryError(f"rectangle {c} is not a valid (x0, y0, x1, y1) box")


@dataclass(frozen=True)
class HangingNode:
    """A constrained midpoint vertex on the interior of a coarser cell's edge."""

    node: int
    endpoints: tuple
    coarse_cell: int


UNIT_SQUARE = DomainSpec([(-1.0, -1.0, 1.0, 1.0)])


def _coord(a, b, num, den):
    # Canonical coordinate of the dyadic parameter num/den on [a, b].  The
    # blend form returns a and b exactly at the ends and yields bit-identical
    # results for every derivation of the same point.
    t = num / den
    return a * (1.0 - t) + b * t


def _validate_domain(rects):
    """Check pairwise compatibility and edge-connectivity of the root rectangles."""
    n = len(rects)
    adj = [set() for _ in range(n)]
    for i in range(n):
        ax0, ay0, ax1, ay1 = rects[i]
        for j in range(i + 1, n):
            bx0, by0, bx1, by1 = rects[j]
            ix0, iy0 = max(ax0, bx0), max(ay0, by0)
            ix1, iy1 = min(ax1, bx1), min(ay1, by1)
            if ix0 > ix1 or iy0 > iy1:
                continue
            if ix0 < ix1 and iy0 < iy1:
                raise GeometryError(f"rectangles {i} and {j} overlap with positive area")
            if ix0 == ix1 and iy0 == iy1:
                continue  # corner contact
            # Segment contact: must be a full edge of both rectangles.
            if ix0 == ix1:  # vertical shared segment
                ok = iy0 == ay0 == by0 and iy1 == ay1 == by1
            else:  # horizontal shared segment
                ok = ix0 == ax0 == bx0 and ix1 == ax1 == bx1
            if not ok:
                raise GeometryError(
                    f"rectangles {i} and {j} share a partial edge; split them so "
                    "that touching rectangles share complete edges"
                )
            adj[i].add(j)
            adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != n:
        raise GeometryError("domain rectangles are not edge-connected")
    # Root adjacency table: neighbor root index per side, -1 = outer boundary.
    nbrs = np.full((n, 4), -1, dtype=np.int64)
    for i in range(n):
        for j in adj[i]:
            a, b = rects[i], rects[j]
            if a[2] == b[0]:
                nbrs[i, EAST] = j
            elif a[0] == b[2]:
                nbrs[i, WEST] = j
            elif a[3] == b[1]:
                nbrs[i, NORTH] = j
            elif a[1] == b[3]:
                nbrs[i, SOUTH] = j
    return nbrs


class Mesh:
    """Quadtree forest over a rectangle union, with 1-irregular leaves."""

    def __init__(self, domain: DomainSpec, _state=None):
        self.domain = domain
        self._rects = [tuple(c) for c in domain.cells]
        self._n_split = 0
        if _state is None:
            self._root_nbrs = _validate_domain(self._rects)
            # Tree arrays: one entry per cell ever created.
            self._root = []
            self._level = []
            self._ix = []
            self._iy = []
            self._parent = []
            self._children = []
            self._active = []
            self._pos = {}
            order = sorted(
                range(len(self._rects)),
                key=lambda r: (0.5 * (self._rects[r][0] + self._rects[r][2]),
                               0.5 * (self._rects[r][1] + self._rects[r][3])),
            )
            for r in order:
                self._new_cell(r, 0, 0, 0, -1)
        else:
            (self._root_nbrs, self._root, self._level, self._ix, self._iy,
             self._parent, self._children, self._active, self._pos) = _state
        self._cache = {}

    # -- tree construction ---------------------------------------------------

    def _new_cell(self, root, level, ix, iy, parent):
        i = len(self._root)
        self._root.append(root)
        self._level.append(level)
        self._ix.append(ix)
        self._iy.append(iy)
        self._parent.append(parent)
        self._children.append(None)
        self._active.append(True)
        self._pos[(root, level, ix, iy)] = i
        return i

    def _copy_state(self):
        return (self._root_nbrs, list(self._root), list(self._level), list(self._ix),
                list(self._iy), list(self._parent), list(self._children),
                list(self._active), dict(self._pos))

    def _neighbor_region(self, i, side):
        """Same-level neighbor position across ``side`` of cell ``i`` or None."""
        r, lev = self._root[i], self._level[i]
        n = 1 << lev
        dx, dy = _SIDE_STEP[side]
        jx, jy = self._ix[i] + dx, self._iy[i] + dy
        if 0 <= jx < n and 0 <= jy < n:
            return r, lev, jx, jy
        r2 = self._root_nbrs[r, side]
        if r2 < 0:
            return None
        # Full-edge sharing means both roots carry the same dyadic grid
        # along the shared edge, so the transverse index carries over.
        return int(r2), lev, jx % n, jy % n

    def _deepest_cell_at(self, region):
        r, lev, jx, jy = region
        while lev >= 0:
            i = self._pos.get((r, lev, jx, jy))
            if i is not None:
                return i
            lev -= 1
            jx //= 2
            jy //= 2
        raise AssertionError("neighbor lookup escaped the tree")

    def _split(self, i, counter):
        """Quadrisect leaf ``i``, first splitting coarser edge neighbors."""
        if not self._active[i]:
            return
        lev = self._level[i]
        if lev + 1 >= _SCALE_BITS:
            raise ValueError(f"refinement depth limit {_SCALE_BITS - 1} reached")
        for side in (WEST, EAST, SOUTH, NORTH):
            while True:
                region = self._neighbor_region(i, side)
                if region is None:
                    break
                j = self._deepest_cell_at(region)
                if self._active[j] and self._level[j] < lev:
                    self._split(j, counter)
                else:
                    break
        r, ix, iy = self._root[i], self._ix[i], self._iy[i]
        self._active[i] = False
        kids = tuple(self._new_cell(r, lev + 1, 2 * ix + dx, 2 * iy + dy, i)
                     for dx in (0, 1) for dy in (0, 1))  # lexicographic center order
        self._children[i] = kids
        counter[0] += 1

    # -- public queries --------------------------------------------------------

    @property
    def n_cells(self):
        """Number of active (leaf) cells."""
        return len(self.active_ids)

    @property
    def active_ids(self):
        """Sorted tree indices of the active cells."""
        if "active_ids" not in self._cache:
            self._cache["active_ids"] = np.flatnonzero(np.asarray(self._active, dtype=bool))
        return self._cache["active_ids"]

    def cell_level(self, i):
        return self._level[i]

    def levels(self):
        """Refinement level per active cell, aligned with ``active_ids``."""
        return np.asarray(self._level, dtype=np.int64)[self.active_ids]

    def cell_box(self, i):
        """Corner coordinates (x0, y0, x1, y1) of cell ``i``."""
        rx0, ry0, rx1, ry1 = self._rects[self._root[i]]
        den = 1 << self._level[i]
        ix, iy = self._ix[i], self._iy[i]
        return (_coord(rx0, rx1, ix, den), _coord(ry0, ry1, iy, den),
                _coord(rx0, rx1, ix + 1, den), _coord(ry0, ry1, iy + 1, den))

    def cell_boxes(self):
        """(n_cells, 4) array of active cell boxes, aligned with ``active_ids``."""
        if "boxes" not in self._cache:
            self._cache["boxes"] = np.array([self.cell_box(i) for i in self.active_ids])
        return self._cache["boxes"]

    def area(self):
        b = self.cell_boxes()
        return float(np.sum((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])))

    def domain_area(self):
        return float(sum((c[2] - c[0]) * (c[3] - c[1]) for c in self._rects))

    def vertices(self):
        """(n_vertices, 2) coordinates, numbered lexicographically by (x, y)."""
        return self._vertex_data()[0]

    def cell_vertices(self):
        """(n_cells, 4) vertex ids per active cell in (SW, SE, NW, NE) order."""
        return self._vertex_data()[1]

    def _vertex_data(self):
        if "vertices" not in self._cache:
            b = self.cell_boxes()
            corners = np.empty((len(b), 4, 2))
            corners[:, 0] = b[:, (0, 1)]
            corners[:, 1] = b[:, (2, 1)]
            corners[:, 2] = b[:, (0, 3)]
            corners[:, 3] = b[:, (2, 3)]
            keys = corners[..., 0].ravel() + 1j * corners[..., 1].ravel()
            uniq, inverse = np.unique(keys, return_inverse=True)
            coords = np.column_stack([uniq.real, uniq.imag])
            self._cache["vertices"] = (coords, inverse.reshape(-1, 4).astype(np.int64))
        return self._cache["vertices"]

    # -- edge classification -----------------------------------------------

    def _edge_key(self, i, side):
        """Exact integer key (root, axis, line, lo, hi) of one cell edge.

        Edges on shared root boundaries are rewritten into the coordinates
        of the lower-numbered root so both owners produce the same key.
        """
        r, lev = self._root[i], self._level[i]
        shift = _SCALE_BITS - lev
        x0 = self._ix[i] << shift
        x1 = (self._ix[i] + 1) << shift
        y0 = self._iy[i] << shift
        y1 = (self._iy[i] + 1) << shift
        if side == WEST:
            axis, line, lo, hi = 0, x0, y0, y1
        elif side == EAST:
            axis, line, lo, hi = 0, x1, y0, y1
        elif side == SOUTH:
            axis, line, lo, hi = 1, y0, x0, x1
        else:
            axis, line, lo, hi = 1, y1, x0, x1
        if line == 0 or line == _FULL:
            r2 = int(self._root_nbrs[r, side])
            if r2 >= 0 and r2 < r:
                r, line = r2, _FULL - line
        return (r, axis, line, lo, hi)

    def _edge_table(self):
        """Classify active edges into hanging interfaces and boundary edges."""
        if "edges" in self._cache:
            return self._cache["edges"]
        table = {}
        for i in self.active_ids:
            for side in (WEST, EAST, SOUTH, NORTH):
                table.setdefault(self._edge_key(i, side), []).append((int(i), side))
        hanging = []
        boundary = []
        for key, owners in table.items():
            if len(owners) == 2:
                continue  # conforming interior edge
            if len(owners) != 1:
                raise AssertionError("more than two cells share one edge")
            (cell, side), (r, axis, line, lo, hi) = owners[0], key
            length = hi - lo
            coarse = table.get((r, axis, line, lo, hi + length))
            if coarse and coarse[0][1] == _OPPOSITE[side]:
                # This is the lower fine edge of a hanging interface.
                upper = table.get((r, axis, line, hi, hi + length))
                if not upper:
                    raise AssertionError("1-irregularity violated at a hanging edge")
                hanging.append({
                    "coarse_cell": coarse[0][0], "coarse_side": coarse[0][1],
                    "fine_cells": (cell, upper[0][0]), "fine_side": side,
                    "axis": axis,
                })
                continue
            if table.get((r, axis, line, lo - length, hi)):
                continue  # upper fine edge, recorded via the lower one
            half = length // 2
            if (table.get((r, axis, line, lo, lo + half))
                    or table.get((r, axis, line, lo + half, hi))):
                continue  # coarse side of a hanging interface
            boundary.append((cell, side))
        hanging.sort(key=lambda h: (h["fine_cells"][0], h["fine_side"]))
        boundary.sort()
        self._cache["edges"] = (hanging, boundary)
        return self._cache["edges"]

    def hanging_interfaces(self):
        """Hanging edge records: coarse cell against two finer neighbors.

        ``fine_cells`` are ordered along the edge (lower coordinate first);
        both face the coarse cell with ``fine_side``.
        """
        return self._edge_table()[0]

    def boundary_edges(self):
        """(cell id, side) pairs of edges on the domain boundary."""
        return self._edge_table()[1]

    def hanging_nodes(self):
        """One HangingNode per constrained midpoint vertex."""
        coords, cellverts = self._vertex_data()
        rows = {int(c): k for k, c in enumerate(self.active_ids)}
        # Local corner ids (SW, SE, NW, NE) at the ends of each cell side.
        side_corners = {WEST: (0, 2), EAST: (1, 3), SOUTH: (0, 1), NORTH: (2, 3)}
        out = []
        for h in self.hanging_interfaces():
            lo_fine, hi_fine = h["fine_cells"]
            c0, c1 = side_corners[h["fine_side"]]
            node = int(cellverts[rows[lo_fine], c1])
            assert node == int(cellverts[rows[hi_fine], c0])
            a0, a1 = side_corners[_OPPOSITE[h["fine_side"]]]
            ca = int(cellverts[rows[h["coarse_cell"]], a0])
            cb = int(cellverts[rows[h["coarse_cell"]], a1])
            out.append(HangingNode(node=node, endpoints=(min(ca, cb), max(ca, cb)),
                                   coarse_cell=h["coarse_cell"]))
        out.sort(key=lambda hn: hn.node)
        return out

    # -- refinement ------------------------------------------------------------

    def refine(self, marked):
        """Quadrisect the marked active cells plus the 1-irregularity closure."""
        marked = sorted(set(int(m) for m in marked))
        active = set(int(i) for i in self.active_ids)
        for m in marked:
            if m not in active:
                raise ValueError(f"cell {m} is not an active cell")
        new = Mesh(self.domain, _state=self._copy_state())
        counter = [0]
        for m in marked:
            new._split(m, counter)
        new._n_split = counter[0]
        return new

    # -- point location ----------------------------------------------------------

    def _np_tree(self):
        if "nptree" not in self._cache:
            kids = np.full((len(self._root), 4), -1, dtype=np.int64)
            for i, c in enumerate(self._children):
                if c is not None:
                    kids[i] = c
            boxes = np.array([self.cell_box(i) for i in range(len(self._root))])
            self._cache["nptree"] = (kids, boxes)
        return self._cache["nptree"]

    def locate(self, points):
        """Map physical points to (active cell id, reference coordinates).

        Points on cell boundaries are assigned deterministically; points
        outside the domain closure raise ValueError.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(pts)
        cells = np.full(n, -1, dtype=np.int64)
        tol = 1e-12
        for r, (x0, y0, x1, y1) in enumerate(self._rects):
            free = cells < 0
            inside = (free & (pts[:, 0] >= x0 - tol) & (pts[:, 0] <= x1 + tol)
                      & (pts[:, 1] >= y0 - tol) & (pts[:, 1] <= y1 + tol))
            cells[inside] = self._pos[(r, 0, 0, 0)]
        if np.any(cells < 0):
            bad = pts[cells < 0][0]
            raise ValueError(f"point {tuple(bad)} lies outside the domain")
        kids, boxes = self._np_tree()
        while True:
            todo = kids[cells, 0] >= 0
            if not np.any(todo):
                break
            sub = cells[todo]
            bx = boxes[sub]
            cx = 0.5 * (bx[:, 0] + bx[:, 2])
            cy = 0.5 * (bx[:, 1] + bx[:, 3])
            # children stored in (dx, dy) = (0,0), (0,1), (1,0), (1,1) order
            off = 2 * (pts[todo, 0] >= cx) + (pts[todo, 1] >= cy)
            cells[todo] = kids[sub, off]
        bx = boxes[cells]
        xi = np.clip(2.0 * (pts[:, 0] - bx[:, 0]) / (bx[:, 2] - bx[:, 0]) - 1.0, -1.0, 1.0)
        eta = np.clip(2.0 * (pts[:, 1] - bx[:, 1]) / (bx[:, 3] - bx[:, 1]) - 1.0, -1.0, 1.0)
        return cells, np.column_stack([xi, eta])


def _renumber_lexicographic(mesh: Mesh) -> Mesh:
    """Renumber tree cells level-major, lexicographically by center within a level."""
    n = len(mesh._root)
    centers = [mesh.cell_box(i) for i in range(n)]
    perm = sorted(range(n), key=lambda i: (mesh._level[i],
                                           0.5 * (centers[i][0] + centers[i][2]),
                                           0.5 * (centers[i][1] + centers[i][3])))
    inv = [0] * n
    for new, old in enumerate(perm):
        inv[old] = new
    state = (
        mesh._root_nbrs,
        [mesh._root[o] for o in perm],
        [mesh._level[o] for o in perm],
        [mesh._ix[o] for o in perm],
        [mesh._iy[o] for o in perm],
        [(-1 if mesh._parent[o] < 0 else inv[mesh._parent[o]]) for o in perm],
        [(None if mesh._children[o] is None else tuple(inv[c] for c in mesh._children[o]))
         for o in perm],
        [mesh._active[o] for o in perm],
        {key: inv[i] for key, i in mesh._pos.items()},
    )
    return Mesh(mesh.domain, _state=state)


def build_mesh(spec: DomainSpec, initial_refinements: int = 0) -> Mesh:
    """Build a conforming mesh with every root cell quadrisected the given number of times."""
    if initial_refinements < 0:
        raise ValueError("initial_refinements must be >= 0")
    mesh = Mesh(spec)
    for _ in range(initial_refinements):
        mesh = mesh.refine(mesh.active_ids)
    return _renumber_lexicographic(mesh)


def refine(mesh: Mesh, marked) -> Mesh:
    return mesh.refine(marked)


def hanging_nodes(mesh: Mesh):
    return mesh.hanging_nodes()


# -- mesh file I/O ---------------------------------------------------------------

def domain_from_file(path) -> DomainSpec:
    """Read a domain from a mesh file.

    Format: ``v <x> <y>`` lines followed by ``q <i0> <i1> <i2> <i3>`` lines
    (counter-clockwise, 0-based); ``#`` starts a comment.  Every quad must be
    an axis-aligned rectangle; the quads become the root cells.
    """
    verts = []
    quads = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "v" and len(parts) == 3:
                    verts.append((float(parts[1]), float(parts[2])))
                elif parts[0] == "q" and len(parts) == 5:
                    quads.append(tuple(int(p) for p in parts[1:]))
                else:
                    raise ValueError
            except ValueError:
                raise GeometryError(f"{path}:{ln}: cannot parse mesh line {raw!r}") from None
    rects = []
    for q in quads:
        try:
            pts = [verts[i] for i in q]
        except IndexError:
            raise GeometryError(f"{path}: quad {q} references a missing vertex") from None
        xs = sorted(set(p[0] for p in pts))
        ys = sorted(set(p[1] for p in pts))
        expect = {(xs[0], ys[0]), (xs[-1], ys[0]), (xs[-1], ys[-1]), (xs[0], ys[-1])}
        if len(xs) != 2 or len(ys) != 2 or set(pts) != expect:
            raise GeometryError(f"{path}: quad {q} is not an axis-aligned rectangle")
        rects.append((xs[0], ys[0], xs[1], ys[1]))
    if not rects:
        raise GeometryError(f"{path}: no quads found")
    return DomainSpec(rects)


def write_domain_file(spec: DomainSpec, path):
    """Write a DomainSpec in the mesh file format (one quad per rectangle)."""
    verts = {}
    quads = []
    for x0, y0, x1, y1 in spec.cells:
        ids = []
        for p in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):  # counter-clockwise
            if p not in verts:
                verts[p] = len(verts)
            ids.append(verts[p])
        quads.append(ids)
    with open(path, "w") as fh:
        fh.write("# mesh file: v <x> <y> then q <i0> <i1> <i2> <i3> (ccw, 0-based)\n")
        for (x, y), _ in sorted(verts.items(), key=lambda kv: kv[1]):
            fh.write(f"v {x!r} {y!r}\n")
        for q in quads:
            fh.write("q {} {} {} {}\n".format(*q))
