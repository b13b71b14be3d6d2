"""Divergence-form elliptic solves and weak Neumann traces.

The discrete operator is a vertex-centred finite-volume form of
``-div(gamma grad .)``: every node owns a trapezoid dual cell, neighbours
along an axis are coupled through the shared dual face, and the face
coefficient is the harmonic mean of the two nodal values of ``gamma``.  The
assembled matrix ``K`` is symmetric positive semidefinite with zero row sums,
and on interior rows ``(K v)_i = -w_i * div_h(gamma grad_h v)_i`` with ``w_i``
the trapezoid node weight.

Neumann data are defined weakly.  For a solution of ``div(gamma grad V) = f``
the functional ``psi -> int gamma grad V . grad psi + int f psi`` only depends
on the boundary values of ``psi``; its value on the boundary hat function of
node ``b`` is ``(K V + w f)_b``.  Dividing by the surface weight of ``b`` gives
the nodal trace, so :func:`~pmedn.grid.boundary_pair` against any boundary
function reproduces the weak form exactly.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import BoundaryField, GridError, ScalarField, same_grid

DIRECT_LIMIT = 20_000
RTOL = 1e-10


class EllipticSolveError(RuntimeError):
    pass


@lru_cache(maxsize=32)
def face_data(grid):
    """Neighbour pairs ``(i, j)`` and geometric factors ``area / spacing``."""
    idx = np.arange(grid.size).reshape(grid.counts)
    weights = [np.full(n, h) for n, h in zip(grid.counts, grid.spacing)]
    for w in weights:
        w[0] = w[-1] = 0.5 * w[1]
    lo, hi, geom = [], [], []
    for a in range(grid.dimension):
        first = np.take(idx, np.arange(grid.counts[a] - 1), axis=a)
        second = np.take(idx, np.arange(1, grid.counts[a]), axis=a)
        area = np.ones(first.shape)
        for b in range(grid.dimension):
            if b == a:
                continue
            shape = [1] * grid.dimension
            shape[b] = grid.counts[b]
            area = area * weights[b].reshape(shape)
        lo.append(first.ravel())
        hi.append(second.ravel())
        geom.append((area / grid.spacing[a]).ravel())
    out = np.concatenate(lo), np.concatenate(hi), np.concatenate(geom)
    for arr in out:
        arr.setflags(write=False)
    return out


def face_coefficients(gamma_values, i, j):
    gi, gj = gamma_values[i], gamma_values[j]
    return 2.0 * gi * gj / (gi + gj)


def assemble(grid, face_values):
    """Symmetric stiffness matrix from per-face conductances."""
    i, j, _ = face_data(grid)
    n = grid.size
    diag = np.bincount(i, face_values, n) + np.bincount(j, face_values, n)
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    vals = np.concatenate([-face_values, -face_values, diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def stiffness(gamma):
    grid = gamma.grid
    i, j, geom = face_data(grid)
    return assemble(grid, geom * face_coefficients(np.asarray(gamma.values), i, j))


class DiscreteOperator:
    """``-div(gamma grad .)`` on a grid, split into interior/boundary blocks.

    Factorisations are cached, so repeated solves with one ``gamma`` are cheap.
    """

    convention = {
        "face_coefficient": "harmonic mean of nodal gamma",
        "sign": "K = -w * div_h(gamma grad_h), positive semidefinite",
        "quadrature": "trapezoid node weights w",
    }

    def __init__(self, gamma):
        vals = np.asarray(gamma.values)
        if not np.all(vals > 0) or not np.all(np.isfinite(vals)):
            i = int(np.flatnonzero(~(vals > 0) | ~np.isfinite(vals))[0])
            raise EllipticSolveError(f"gamma must be positive, got {vals[i]!r} at node {i}")
        self.gamma = gamma
        self.grid = gamma.grid
        self.K = stiffness(gamma)
        inner, bnd = self.grid.interior, self.grid.boundary
        self.K_II = self.K[inner][:, inner].tocsc()
        self.K_IB = self.K[inner][:, bnd].tocsr()
        self._lu = None

    def _solve_interior(self, b):
        n = self.K_II.shape[0]
        if n < DIRECT_LIMIT:
            if self._lu is None:
                self._lu = spla.splu(self.K_II)
            x = self._lu.solve(b)
        else:
            diag = self.K_II.diagonal()
            precond = spla.LinearOperator((n, n), matvec=lambda r: r / diag)
            maxiter = int(50 * np.sqrt(n))
            x = np.empty_like(b)
            cols = b if b.ndim == 2 else b[:, None]
            x = x if b.ndim == 2 else x[:, None]
            for c in range(cols.shape[1]):
                x[:, c], info = spla.cg(
                    self.K_II, cols[:, c], rtol=0.5 * RTOL, atol=0.0, maxiter=maxiter, M=precond
                )
                if info != 0:
                    res = np.linalg.norm(self.K_II @ x[:, c] - cols[:, c])
                    raise EllipticSolveError(
                        f"CG did not converge in {maxiter} iterations (residual {res:.3e})"
                    )
            x = x if b.ndim == 2 else x[:, 0]
        rhs_norm = np.linalg.norm(b, axis=0)
        res = np.linalg.norm(self.K_II @ x - b, axis=0)
        scale = np.maximum(rhs_norm, np.finfo(float).tiny)
        if np.any(res > RTOL * scale):
            raise EllipticSolveError(f"linear solve residual {np.max(res / scale):.3e}")
        return x

    def solve(self, g, rhs=None):
        """Nodal solution of ``div(gamma grad V) = rhs`` with ``V = g`` on the boundary.

        ``g`` has shape ``(nb,)`` or ``(nb, k)``; ``rhs`` is nodal, same layout.
        """
        g = np.asarray(g, dtype=float)
        inner, bnd = self.grid.interior, self.grid.boundary
        b = -(self.K_IB @ g)
        if rhs is not None:
            w = self.grid.node_weights[inner]
            rhs = np.asarray(rhs, dtype=float)
            b = b - (w[:, None] * rhs[inner] if rhs.ndim == 2 else w * rhs[inner])
        out = np.empty((self.grid.size,) + g.shape[1:])
        out[bnd] = g
        out[inner] = self._solve_interior(b)
        return out

    def flux_functional(self, v, rhs=None):
        """Weak-form functional values on the boundary hat functions."""
        tau = self.K @ v
        if rhs is not None:
            w = self.grid.node_weights
            rhs = np.asarray(rhs, dtype=float)
            tau = tau + (w[:, None] * rhs if rhs.ndim == 2 else w * rhs)
        return tau[self.grid.boundary]

    def trace(self, v, rhs=None):
        tau = self.flux_functional(v, rhs)
        s = self.grid.surface_weights
        return tau / (s[:, None] if tau.ndim == 2 else s)

    def residual(self, v, rhs=None):
        """Interior residual of ``div(gamma grad v) - rhs`` in weak (weighted) form."""
        r = self.K @ v
        if rhs is not None:
            r = r + self.grid.node_weights * rhs
        return r[self.grid.interior]


@dataclass(frozen=True, eq=False)
class EllipticProblem:
    gamma: ScalarField
    rhs: ScalarField
    g: BoundaryField

    def __post_init__(self):
        same_grid(self.gamma, self.rhs)
        same_grid(self.gamma, self.g)


def solve_dirichlet(p, operator=None):
    op = operator or DiscreteOperator(p.gamma)
    return ScalarField(p.gamma.grid, op.solve(p.g.values, p.rhs.values))


def neumann_trace(gamma, V, rhs=None, operator=None):
    """Weak conormal derivative ``gamma d_nu V`` of a solution of ``div(gamma grad V) = rhs``."""
    same_grid(gamma, V)
    if rhs is not None:
        same_grid(gamma, rhs)
        rhs = rhs.values
    op = operator or DiscreteOperator(gamma)
    return BoundaryField(gamma.grid, op.trace(np.asarray(V.values), rhs))


def harmonic_family(gamma, boundary_basis, operator=None):
    """``gamma``-harmonic lifts of each boundary function."""
    op = operator or DiscreteOperator(gamma)
    if not boundary_basis:
        return []
    for b in boundary_basis:
        if b.grid != gamma.grid:
            raise GridError("basis function lives on a different grid")
    G = np.stack([np.asarray(b.values) for b in boundary_basis], axis=1)
    V = op.solve(G)
    return [ScalarField(gamma.grid, V[:, c]) for c in range(V.shape[1])]


def dn_matrix(gamma, basis, operator=None):
    """``M[i, j] = <Lambda_gamma g_i, g_j>`` for a list of boundary functions."""
    op = operator or DiscreteOperator(gamma)
    G = np.stack([np.asarray(b.values) for b in basis], axis=1)
    tau = op.flux_functional(op.solve(G))
    return tau.T @ G


def write_dn_matrix_csv(path, matrix, labels):
    import csv

    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["basis", *labels])
        for lab, row in zip(labels, matrix):
            out.writerow([lab, *(format(float(v), ".17g") for v in row)])
