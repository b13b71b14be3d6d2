import math

import numpy as np
import pytest

from pmedn.forward import (
    ForwardError,
    PMEProblem,
    RegularizationLevel,
    energy_norm,
    geometric_stamps,
    kirchhoff,
    kirchhoff_prime,
    mobility,
    solve_level,
    solve_pme,
    step_fluxes,
)
from pmedn.grid import ScalarField, TimeField, field_from_expression, make_grid

from conftest import constant


def _problem(grid, boundary, m=2.0, horizon=0.5, steps=20, eps="1", gamma="1", source=None):
    return PMEProblem(
        field_from_expression(eps, grid), field_from_expression(gamma, grid), m, boundary, horizon,
        steps, source,
    )


def _wave(n, horizon=0.5):
    g = make_grid(1, 2.0, n)
    xb = g.coords[g.boundary, 0]
    p = _problem(g, lambda t: 0.5 * np.maximum(t - xb, 0.0), horizon=horizon, steps=None)
    return g, p


@pytest.mark.parametrize(
    "gamma, lam, window, m, expected",
    [(1.0, 2.0, (0.1, 10), 2, 4.0), (1.0, 0.01, (0.1, 10), 2, 0.2), (3.0, 1.0, (0.5, 2), 3, 9.0)],
)
def test_mobility_examples(gamma, lam, window, m, expected):
    level = RegularizationLevel(10.0, *window)
    assert math.isclose(mobility(gamma, lam, level, m), expected)


def test_kirchhoff_matches_power_on_window():
    level = RegularizationLevel(10.0, 0.1, 3.0)
    u = np.linspace(0.1, 3.0, 17)
    np.testing.assert_allclose(kirchhoff(u, level, 2.5), u**2.5)
    # outside the window the potential continues linearly with the clamped slope
    v = np.array([0.0, 5.0])
    np.testing.assert_allclose(np.diff(kirchhoff(np.array([4.0, 5.0]), level, 2.0)), kirchhoff_prime(v, level, 2.0)[1])


def test_zero_data_gives_floor():
    g = make_grid(2, 1.0, 7)
    p = _problem(g, lambda t: np.zeros(g.boundary.size))
    level = RegularizationLevel.for_problem(p, 100.0)
    u = solve_level(p, level, source_lift=0.0)
    np.testing.assert_allclose(u.values, 0.01, rtol=1e-12)


def test_zero_data_limit_vanishes():
    g = make_grid(1, 1.0, 11)
    p = _problem(g, lambda t: np.zeros(2), steps=5)
    u = solve_pme(p, 1e-6, k0=100)
    assert np.max(u.values) <= 1e-6
    assert u.meta["k_sequence"][0] == 100


def test_traveling_wave_oracle():
    g, p = _wave(101)
    u = solve_pme(p, 1e-4, k0=1e6)
    exact = 0.5 * np.maximum(u.times[:, None] - g.coords[None, :, 0], 0.0)
    assert np.max(np.abs(u.values - exact)) <= 2.5e-3


def test_traveling_wave_energy_stable_under_refinement():
    norms = []
    for n in (101, 201):
        _, p = _wave(n)
        norms.append(energy_norm(solve_pme(p, 1e-4, k0=1e6), 2.0))
    assert np.isfinite(norms).all()
    assert abs(norms[1] - norms[0]) <= 0.02 * norms[1]


def test_heat_mode_linear_growth():
    # m = 1, f = 1, phi = t: u = t exactly
    g = make_grid(1, 1.0, 11)
    p = _problem(g, lambda t: np.full(2, t), m=1.0, horizon=1.0, steps=10, source=1.0)
    u = solve_pme(p, 1e-7, k0=1e3, k_max=1e10, source_lift=0.0)
    np.testing.assert_allclose(u.values, np.broadcast_to(u.times[:, None], u.values.shape), atol=1e-6)


def test_maximum_principle_with_capped_data():
    g = make_grid(2, 1.0, 9)
    xb = g.coords[g.boundary]
    prof = 1 + 0.5 * np.cos(3 * xb[:, 0]) * xb[:, 1]
    p = _problem(g, lambda t: min(t, 1.0) * prof, horizon=2.0, steps=40, gamma="1 + x1")
    u = solve_pme(p, 1e-5, k0=1e3)
    k = u.meta["k"]
    assert np.max(u.values) <= prof.max() + 1.0 / k + 1e-9
    assert u.meta["max_principle_defect"] <= 1e-9


def test_level_bounds_monotonicity_and_comparison():
    g = make_grid(2, 1.0, 9)
    xb = g.coords[g.boundary]
    prof = 1 + 0.5 * np.sin(4 * xb[:, 0] + xb[:, 1])
    p1 = _problem(g, lambda t: t * prof, eps="1 + 0.5*x1", gamma="2 - x2", m=3.0)
    p2 = _problem(g, lambda t: t * prof * 1.2 + 0.1 * t, eps="1 + 0.5*x1", gamma="2 - x2", m=3.0)
    times = np.linspace(0, 0.5, 21)
    lev = RegularizationLevel.for_problem(p2, 1e3, times)
    lev2 = RegularizationLevel.for_problem(p2, 2e3, times)
    u1, u2 = solve_level(p1, lev, times), solve_level(p2, lev, times)
    assert np.min(u1.values) >= 1e-3 - 1e-12
    assert np.max(u1.values - u2.values) <= 1e-9
    u1k = solve_level(p1, lev2, times)
    assert np.max(u1k.values - u1.values) <= 1e-9


def test_conservation_defect_small():
    g = make_grid(2, 1.0, 9)
    xb = g.coords[g.boundary]
    p = _problem(g, lambda t: t * (1 + xb[:, 0]), eps="1 + x2", gamma="1 + x1*x2", source=0.3)
    u = solve_pme(p, 1e-5, k0=1e4)
    _, defect = step_fluxes(p, u, u.meta["k"])
    assert np.max(defect) <= 1e-8


def test_polynomial_growth_of_the_flow():
    g = make_grid(2, 1.0, 9)
    xb = g.coords[g.boundary]
    gv = 1 + 0.5 * np.cos(2 * np.pi * xb[:, 0])
    m = 2.0
    p = _problem(g, lambda t: (t * gv) ** (1 / m), horizon=2.0, steps=40, gamma="1 + x1")
    u = solve_pme(p, 1e-6, k0=1e4)
    sup_v = np.max(u.values, axis=1) ** m
    assert np.all(sup_v <= u.times * gv.max() + 10.0 / u.meta["k"])


def test_energy_norm_examples():
    g = make_grid(2, 1.0, 11)
    times = np.linspace(0.0, 2.0, 2001)
    const = TimeField(g, times, np.ones((times.size, g.size)))
    assert energy_norm(const, 2.0) == 0.0
    u = TimeField(g, times, times[:, None] * g.coords[None, :, 0])
    assert math.isclose(energy_norm(u, 1.0) ** 2, 2.0**3 / 3, rel_tol=1e-6)


def test_geometric_stamps():
    ts = geometric_stamps(10.0, dt0=1e-2, uniform_steps=5, ratio=1.1)
    assert ts[0] == 0 and ts[-1] >= 10.0
    assert (ts.size - 1) % 2 == 0
    np.testing.assert_allclose(np.diff(ts)[:6], 1e-2)
    assert np.all(np.diff(ts, 2)[6:] > 0)


def test_problem_validation():
    g = make_grid(1, 1.0, 5)
    one = constant(g)
    with pytest.raises(ValueError):
        PMEProblem(one, one, 0.5, lambda t: np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        PMEProblem(one, one, 2.0, lambda t: np.ones(2), 1.0)
    with pytest.raises(ValueError):
        PMEProblem(ScalarField(g, -np.ones(5)), one, 2.0, lambda t: np.zeros(2), 1.0)


def test_k_sequence_exhaustion_is_reported():
    g, p = _wave(21)
    with pytest.raises(ForwardError, match="k-sequence exhausted"):
        solve_pme(p, 1e-12, k0=100, k_max=400)
