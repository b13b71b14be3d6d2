import numpy as np
import pytest

from pmedn.expr import evaluate
from pmedn.families import (
    fourier_boundary_family,
    harmonic_polynomials,
    perimeter_parameter,
    positive_shift,
)
from pmedn.grid import make_grid


@pytest.mark.parametrize("dim, degree, count", [(1, 3, 2), (2, 0, 1), (2, 3, 7), (3, 2, 9)])
def test_harmonic_polynomial_counts(dim, degree, count):
    assert len(harmonic_polynomials(degree, dim)) == count


def test_harmonic_polynomials_are_harmonic():
    # five-point Laplacian of a polynomial of degree <= 3 is exact
    x = np.array([[0.3, 0.7]])
    d = 1e-2
    for p in harmonic_polynomials(3):
        shifts = [(d, 0), (-d, 0), (0, d), (0, -d)]
        lap = sum(evaluate(p, x + np.array(s))[0] for s in shifts) - 4 * evaluate(p, x)[0]
        assert abs(lap) <= 1e-10


def test_fourier_family_positive_and_labelled():
    g = make_grid(2, 1.0, 9)
    fam = fourier_boundary_family(g, 5, 0.5)
    assert [name for name, _ in fam] == ["cos1", "sin1", "cos2", "sin2", "cos3"]
    assert all(b.values.min() >= 0.5 - 1e-12 for _, b in fam)


def test_perimeter_parameter_covers_unit_interval():
    g = make_grid(2, (1.0, 2.0), (5, 9))
    s = perimeter_parameter(g)
    assert s.min() == 0 and s.max() < 1 and np.unique(s).size == s.size


def test_positive_shift():
    out = positive_shift(np.array([-2.0, 1.0]), 0.5)
    np.testing.assert_array_equal(out, [0.5, 3.5])
