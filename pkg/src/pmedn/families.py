"""Boundary data and harmonic test-function families."""

import math

import numpy as np

from .grid import BoundaryField


def harmonic_polynomials(degree, dimension=2):
    """Expressions of harmonic polynomials up to ``degree``.

    In 2D these are ``Re`` and ``Im`` of ``(x1 - 1/2 + i (x2 - 1/2))^n``;
    centring at the middle of the unit square keeps them well scaled.  In
    1D only ``1`` and ``x1`` are harmonic; in 3D the coordinate functions
    and the pairwise products ``xa xb`` and ``xa^2 - xb^2`` are used.
    """
    out = ["1"]
    if dimension == 1:
        return out + (["x1"] if degree >= 1 else [])
    if dimension == 3:
        if degree >= 1:
            out += ["x1", "x2", "x3"]
        if degree >= 2:
            out += ["x1*x2", "x1*x3", "x2*x3", "x1^2 - x2^2", "x1^2 - x3^2"]
        return out
    for n in range(1, degree + 1):
        re, im = _complex_power_terms(n)
        out += [re, im]
    return out


def _complex_power_terms(n):
    a, b = "(x1 - 0.5)", "(x2 - 0.5)"
    re, im = [], []
    for j in range(n + 1):
        c = math.comb(n, j)
        term = f"{c}*{a}^{n - j}*{b}^{j}"
        # i^j cycles through 1, i, -1, -i
        if j % 4 == 0:
            re.append("+" + term)
        elif j % 4 == 1:
            im.append("+" + term)
        elif j % 4 == 2:
            re.append("-" + term)
        else:
            im.append("-" + term)
    return "".join(re).lstrip("+"), "".join(im).lstrip("+")


def perimeter_parameter(grid):
    """Arclength position (in ``[0, 1)``) of each boundary node of a 2D box, counter-clockwise."""
    if grid.dimension != 2:
        raise ValueError("perimeter parameter needs a 2D grid")
    x = grid.coords[grid.boundary]
    L1, L2 = grid.extents
    P = 2 * (L1 + L2)
    s = np.empty(len(x))
    for i, (a, b) in enumerate(x):
        if np.isclose(b, 0.0):
            s[i] = a
        elif np.isclose(a, L1):
            s[i] = L1 + b
        elif np.isclose(b, L2):
            s[i] = L1 + L2 + (L1 - a)
        else:
            s[i] = 2 * L1 + L2 + (L2 - b)
    return s / P


def fourier_boundary_family(grid, count, amplitude=0.5):
    """``count`` positive data ``1 + amplitude * cos/sin(2 pi k s)`` along the perimeter."""
    s = perimeter_parameter(grid)
    out = []
    k = 1
    while len(out) < count:
        out.append(("cos%d" % k, 1 + amplitude * np.cos(2 * np.pi * k * s)))
        if len(out) < count:
            out.append(("sin%d" % k, 1 + amplitude * np.sin(2 * np.pi * k * s)))
        k += 1
    return [(name, BoundaryField(grid, v)) for name, v in out]


def positive_shift(values, margin=0.5):
    """Shift a nodal array by a constant so its minimum equals ``margin``."""
    values = np.asarray(values, dtype=float)
    return values - values.min() + margin
