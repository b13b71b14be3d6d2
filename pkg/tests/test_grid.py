import math

import numpy as np
import pytest

from pmedn.expr import evaluate
from pmedn.grid import (
    BoundaryField,
    BoundsError,
    CoefficientSpec,
    GridError,
    ScalarField,
    TimeField,
    boundary_from_expression,
    boundary_pair,
    eval_coefficient,
    field_from_expression,
    integrate,
    make_grid,
)


@pytest.mark.parametrize(
    "dim, extents, counts, spacing, nb, total",
    [
        (1, 1.0, 11, (0.1,), 2, 11),
        (2, (1, 1), (5, 5), (0.25, 0.25), 16, 25),
        (3, (1, 1, 1), (4, 4, 4), (1 / 3,) * 3, 56, 64),
    ],
)
def test_grid_counts(dim, extents, counts, spacing, nb, total):
    g = make_grid(dim, extents, counts)
    assert g.size == total
    assert g.boundary.size == nb
    assert g.interior.size == total - nb
    np.testing.assert_allclose(g.spacing, spacing)


def test_grid_rejects_bad_input():
    with pytest.raises(GridError):
        make_grid(2, 1.0, 2)
    with pytest.raises(GridError):
        make_grid(4, 1.0, 5)
    with pytest.raises(GridError):
        make_grid(2, (1.0, -1.0), 5)


def test_corner_normals_follow_lowest_axis():
    g = make_grid(2, 1.0, 5)
    xb = g.coords[g.boundary]
    corner = np.flatnonzero(np.all(np.isclose(xb, [1.0, 1.0]), axis=1))[0]
    np.testing.assert_array_equal(g.normals[corner], [1.0, 0.0])
    bottom = np.flatnonzero(np.all(np.isclose(xb, [0.5, 0.0]), axis=1))[0]
    np.testing.assert_array_equal(g.normals[bottom], [0.0, -1.0])


def test_surface_weights_sum_to_perimeter():
    g = make_grid(2, (1.0, 2.0), (5, 9))
    assert math.isclose(g.surface_weights.sum(), 6.0)
    g3 = make_grid(3, 1.0, 4)
    assert math.isclose(g3.surface_weights.sum(), 6.0)


@pytest.mark.parametrize("text, expected", [("1", 1.0), ("x1", 0.5)])
def test_integrate_examples(text, expected):
    g = make_grid(2, 1.0, 11)
    assert math.isclose(integrate(field_from_expression(text, g)), expected, rel_tol=1e-12)


def test_integrate_sine_product():
    g = make_grid(2, 1.0, 101)
    f = field_from_expression("sin(pi*x1)*sin(pi*x2)", g)
    assert abs(integrate(f) - 4 / math.pi**2) <= 1e-4


def test_boundary_pair_examples():
    g = make_grid(2, 1.0, 11)
    one = boundary_from_expression("1", g)
    x1 = boundary_from_expression("x1", g)
    assert math.isclose(boundary_pair(one, one), 4.0)
    assert math.isclose(boundary_pair(one, x1), 2.0)


def test_boundary_pair_x1_x2():
    # edgewise: int x1 x2 over the perimeter of the unit square is 1/2 + 1/2 = 1
    g = make_grid(2, 1.0, 201)
    a = boundary_from_expression("x1", g)
    b = boundary_from_expression("x2", g)
    assert abs(boundary_pair(a, b) - 1.0) <= 1e-3


def test_coefficient_examples():
    g = make_grid(1, 1.0, 21)
    c = eval_coefficient(CoefficientSpec.parse("1.0", 0.1, 10), g)
    np.testing.assert_array_equal(c.values, 1.0)
    s = eval_coefficient(CoefficientSpec.parse("1 + 0.5*sin(pi*x1)", 0.1, 10), g)
    assert s.values.min() >= 1.0 - 1e-15 and s.values.max() <= 1.5
    e = eval_coefficient(CoefficientSpec.parse("exp(x1)", 0.1, 10), g)
    assert e.values.min() == 1.0 and math.isclose(e.values.max(), math.e)


def test_coefficient_bounds_violation_names_node():
    g = make_grid(1, 1.0, 5)
    with pytest.raises(BoundsError, match="node"):
        eval_coefficient(CoefficientSpec.parse("x1", 0.1, 10), g)


def test_fields_are_immutable():
    g = make_grid(1, 1.0, 5)
    f = ScalarField(g, np.zeros(5))
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_field_size_checks():
    g = make_grid(2, 1.0, 5)
    with pytest.raises(GridError):
        ScalarField(g, np.zeros(3))
    with pytest.raises(GridError):
        BoundaryField(g, np.zeros(25))
    with pytest.raises(GridError):
        TimeField(g, np.array([0.0, 0.0]), np.zeros((2, 25)))


def test_trace_matches_boundary_expression():
    g = make_grid(2, 1.0, 7)
    f = field_from_expression("x1 + 2*x2", g)
    np.testing.assert_array_equal(
        f.trace().values, evaluate("x1 + 2*x2", g.coords[g.boundary])
    )
