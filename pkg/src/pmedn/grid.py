"""Structured box grids, nodal fields and quadrature.

Nodes are stored in row-major (C) order over the axes ``x1, x2, x3``.  Volume
quadrature is the tensor trapezoid rule; surface quadrature is the trapezoid
rule on each face, so a node lying on several faces (an edge or corner) gets
the sum of its face weights.  Every boundary node carries one outward normal
direction: the lowest-index axis on which the node sits at an end of the box.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .expr import evaluate


class GridError(ValueError):
    pass


class BoundsError(ValueError):
    pass


def _trapezoid_weights(n, step):
    w = np.full(n, step)
    w[0] = w[-1] = 0.5 * step
    return w


@dataclass(frozen=True)
class Grid:
    dimension: int
    extents: tuple
    counts: tuple

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise GridError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        extents = tuple(float(e) for e in np.atleast_1d(self.extents))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(extents) != self.dimension or len(counts) != self.dimension:
            raise GridError("extents and counts need one entry per axis")
        if any(c < 3 for c in counts):
            raise GridError(f"need at least 3 nodes per axis, got {counts}")
        if any(not np.isfinite(e) or e <= 0 for e in extents):
            raise GridError(f"extents must be positive, got {extents}")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self):
        return self.counts

    @property
    def size(self):
        return int(np.prod(self.counts))

    @cached_property
    def spacing(self):
        return tuple(e / (c - 1) for e, c in zip(self.extents, self.counts))

    @cached_property
    def axes(self):
        return tuple(np.linspace(0.0, e, c) for e, c in zip(self.extents, self.counts))

    @cached_property
    def coords(self):
        """Node coordinates, shape ``(size, dimension)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def multi_index(self):
        return np.stack(np.unravel_index(np.arange(self.size), self.counts), axis=1)

    @cached_property
    def _boundary_info(self):
        idx = self.multi_index
        at_low = idx == 0
        at_high = idx == np.array(self.counts) - 1
        on = at_low | at_high
        nodes = np.flatnonzero(on.any(axis=1))
        first = np.argmax(on[nodes], axis=1)
        sign = np.where(at_low[nodes, first], -1, 1)
        return nodes, first, sign

    @property
    def boundary(self):
        """Indices of boundary nodes (ascending)."""
        return self._boundary_info[0]

    @cached_property
    def interior(self):
        mask = np.ones(self.size, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    @property
    def normal_axis(self):
        return self._boundary_info[1]

    @property
    def normal_sign(self):
        return self._boundary_info[2]

    @cached_property
    def normals(self):
        """Outward unit normals of the boundary nodes, shape ``(nb, d)``."""
        out = np.zeros((self.boundary.size, self.dimension))
        out[np.arange(self.boundary.size), self.normal_axis] = self.normal_sign
        return out

    @cached_property
    def node_weights(self):
        w = np.ones(1)
        for n, h in zip(self.counts, self.spacing):
            w = np.multiply.outer(w, _trapezoid_weights(n, h))
        return w.ravel()

    @cached_property
    def surface_weights(self):
        """Trapezoid surface weights of the boundary nodes, summed over faces."""
        idx = self.multi_index[self.boundary]
        one_d = [_trapezoid_weights(n, h) for n, h in zip(self.counts, self.spacing)]
        total = np.zeros(self.boundary.size)
        for a in range(self.dimension):
            on_face = (idx[:, a] == 0) | (idx[:, a] == self.counts[a] - 1)
            w = np.ones(self.boundary.size)
            for b in range(self.dimension):
                if b != a:
                    w = w * one_d[b][idx[:, b]]
            total += np.where(on_face, w, 0.0)
        return total

    @cached_property
    def boundary_position(self):
        """Map node index -> position in the boundary arrays (-1 for interior)."""
        pos = np.full(self.size, -1)
        pos[self.boundary] = np.arange(self.boundary.size)
        return pos


def make_grid(dimension, extents, counts):
    """Build a uniform box grid ``[0, extents[0]] x ...`` with ``counts`` nodes per axis."""
    extents = np.atleast_1d(extents)
    counts = np.atleast_1d(counts)
    if extents.size == 1 and dimension > 1:
        extents = np.repeat(extents, dimension)
    if counts.size == 1 and dimension > 1:
        counts = np.repeat(counts, dimension)
    return Grid(int(dimension), tuple(extents.tolist()), tuple(int(c) for c in counts))


def _frozen(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    bounds: tuple = None  # (lower, upper) for coefficient fields

    def __post_init__(self):
        values = _frozen(np.ravel(self.values))
        if values.size != self.grid.size:
            raise GridError(f"field has {values.size} values, grid has {self.grid.size} nodes")
        object.__setattr__(self, "values", values)
        if self.bounds is not None:
            check_bounds(values, self.bounds, self.grid)

    def trace(self):
        return BoundaryField(self.grid, self.values[self.grid.boundary])

    def reshaped(self):
        return self.values.reshape(self.grid.counts)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class BoundaryField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(np.ravel(self.values))
        if values.size != self.grid.boundary.size:
            raise GridError(
                f"boundary field has {values.size} values, grid has "
                f"{self.grid.boundary.size} boundary nodes"
            )
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class TimeField:
    grid: Grid
    times: np.ndarray
    values: np.ndarray  # shape (len(times), grid.size)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen(self.times)
        values = _frozen(self.values)
        if times.ndim != 1 or times.size < 1 or times[0] != 0.0:
            raise GridError("time stamps must start at 0")
        if np.any(np.diff(times) <= 0):
            raise GridError("time stamps must be strictly increasing")
        if values.shape != (times.size, self.grid.size):
            raise GridError(f"values shape {values.shape} does not match stamps x nodes")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size

    def __getitem__(self, n):
        return ScalarField(self.grid, self.values[n])

    def subsample(self, stride):
        return TimeField(self.grid, self.times[::stride], self.values[::stride], dict(self.meta))


def check_bounds(values, bounds, grid=None):
    lo, hi = bounds
    bad = np.flatnonzero(~((values >= lo) & (values <= hi)))
    if bad.size:
        i = int(bad[0])
        where = f" at node {i}"
        if grid is not None:
            where += f" (x = {tuple(np.round(grid.coords[i], 6))})"
        raise BoundsError(f"value {values[i]!r}{where} outside declared bounds [{lo}, {hi}]")


def same_grid(a, b):
    if a.grid != b.grid:
        raise GridError("fields live on different grids")


def integrate(f):
    """Trapezoid-rule volume integral of a nodal field."""
    return float(f.grid.node_weights @ np.asarray(f.values))


def boundary_pair(a, b):
    """Surface-quadrature approximation of the boundary integral of ``a * b``."""
    same_grid(a, b)
    return float(np.sum(a.grid.surface_weights * a.values * b.values))


def field_from_expression(text, grid, bounds=None):
    return ScalarField(grid, evaluate(text, grid.coords), bounds=bounds)


def boundary_from_expression(text, grid):
    return BoundaryField(grid, evaluate(text, grid.coords[grid.boundary]))


@dataclass(frozen=True)
class CoefficientSpec:
    """A positive coefficient given either by an expression or by a field file."""

    lower: float
    upper: float
    expression: str = None
    path: str = None

    def __post_init__(self):
        if (self.expression is None) == (self.path is None):
            raise ValueError("give exactly one of expression or path")
        if not 0 < self.lower <= self.upper:
            raise ValueError(f"need 0 < lower <= upper, got [{self.lower}, {self.upper}]")

    @classmethod
    def parse(cls, text, lower, upper):
        text = str(text).strip()
        if text.startswith("file:"):
            return cls(lower, upper, path=text[5:])
        return cls(lower, upper, expression=text)

    def describe(self):
        return f"file:{self.path}" if self.path else self.expression


def eval_coefficient(spec, grid):
    """Evaluate a coefficient on ``grid`` and check it against its bounds."""
    if spec.expression is not None:
        values = evaluate(spec.expression, grid.coords)
    else:
        from .fieldio import read_field

        f = read_field(spec.path)
        if f.grid != grid:
            raise GridError(f"{spec.path}: field grid does not match the run grid")
        values = f.values
    return ScalarField(grid, values, bounds=(spec.lower, spec.upper))
