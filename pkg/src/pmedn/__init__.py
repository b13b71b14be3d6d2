"""Porous medium forward solver, Laplace-domain DN maps and coefficient reconstruction."""

__version__ = "0.1.0"

from .grid import (  # noqa: E402
    BoundaryField,
    CoefficientSpec,
    Grid,
    ScalarField,
    TimeField,
    boundary_pair,
    eval_coefficient,
    integrate,
    make_grid,
)

__all__ = [
    "BoundaryField",
    "CoefficientSpec",
    "Grid",
    "ScalarField",
    "TimeField",
    "boundary_pair",
    "eval_coefficient",
    "integrate",
    "make_grid",
]
