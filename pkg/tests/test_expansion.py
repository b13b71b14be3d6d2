import math

import mpmath
import numpy as np
import pytest

from pmedn.elliptic import DiscreteOperator
from pmedn.expansion import (
    CheckResult,
    FitError,
    build_oracle,
    comparison_function,
    find_sigma,
    fit_expansion,
    gamma_one_plus,
    loglog_slope,
    nonneg_power,
    remainder_order,
    remainders,
    smoothstep,
    verify_expansion,
)
from pmedn.grid import BoundaryField, boundary_pair, make_grid
from pmedn.laplace import DNSampleSet

from conftest import constant


def test_gamma_one_plus_examples():
    assert math.isclose(gamma_one_plus(2.0), 0.8862269255, rel_tol=1e-10)
    assert abs(gamma_one_plus(1000.0) - 1.0) <= 1e-3
    assert math.isclose(gamma_one_plus(3.0), 0.8929795116, rel_tol=1e-10)
    with pytest.raises(ValueError):
        gamma_one_plus(1.0)


@pytest.mark.parametrize("m", [1.01, 1.5, 2.0, 3.0, 7.25, 50.0])
def test_gamma_one_plus_against_mpmath(m):
    mpmath.mp.dps = 30
    ref = float(mpmath.gamma(1 + mpmath.mpf(1) / mpmath.mpf(m)))
    assert math.isclose(gamma_one_plus(m), ref, rel_tol=1e-10)


def test_remainder_order():
    assert remainder_order(1.5) == pytest.approx(2 - 4 / 3)
    assert remainder_order(2.0) == 1.0
    assert remainder_order(5.0) == 1.0


def test_nonneg_power_convention():
    np.testing.assert_array_equal(nonneg_power(np.array([0.0, -1e-17, 4.0]), 0.5), [0.0, 0.0, 2.0])


def test_zero_data_oracle():
    g = make_grid(2, 1.0, 7)
    one = constant(g)
    o = build_oracle(one, one, 2.0, BoundaryField(g, np.zeros(g.boundary.size)))
    assert not o.V0.values.any() and not o.V1.values.any()
    R1, R2 = remainders(o.V0, o, 4.0)
    assert not R1.values.any() and not R2.values.any()


def _torsion_center(terms=401):
    # w solves -lap w = 1 on the unit square with w = 0 on the boundary
    k = np.arange(1, terms, 2, dtype=float)
    mm, nn = np.meshgrid(k, k, indexing="ij")
    signs = np.sin(mm * np.pi / 2) * np.sin(nn * np.pi / 2)
    return float(np.sum(16 * signs / (np.pi**4 * mm * nn * (mm**2 + nn**2))))


def test_torsion_oracle():
    p = _torsion_center()
    assert abs(p - 0.07367) <= 1e-5
    g = make_grid(2, 1.0, 65)
    one = constant(g)
    o = build_oracle(one, one, 2.0, BoundaryField(g, np.ones(g.boundary.size)))
    np.testing.assert_allclose(o.V0.values, 1.0, atol=1e-12)
    centre = g.size // 2
    assert abs(o.V1.values[centre] + gamma_one_plus(2.0) * p) <= 1e-3


def test_oracle_invariants_variable_coefficients():
    g = make_grid(2, 1.0, 13)
    from pmedn.grid import field_from_expression
    eps = field_from_expression("1 + 0.5*sin(3*x1)", g)
    gamma = field_from_expression("1 + x1*x2", g)
    gb = BoundaryField(g, 1 + 0.5 * np.cos(4 * g.coords[g.boundary, 0]))
    o = build_oracle(eps, gamma, 1.5, gb)
    assert np.max(o.V1.values) <= 1e-9
    assert np.min(o.V0.values) >= 0
    np.testing.assert_array_equal(o.V1.values[g.boundary], 0.0)


def test_fit_recovers_exact_two_term_data():
    rng = np.random.default_rng(3)
    A, B = rng.standard_normal(12), rng.standard_normal(12)
    hs = np.array([4.0, 8.0, 16.0, 32.0, 64.0])
    m = 2.0
    Y = A + np.outer(hs ** (1 / m - 2), B)
    fit = fit_expansion(Y, m, hs)
    np.testing.assert_allclose(fit.A, A, atol=1e-12)
    np.testing.assert_allclose(fit.B, B, atol=1e-11)


def test_fit_remainder_bound_and_hand_solution():
    m, M = 2.0, remainder_order(2.0)
    hs = np.array([8.0, 16.0, 32.0, 64.0])
    A, B, c = 1.3, -0.4, 5.0
    Y = (A + hs ** (1 / m - 2) * B + c * hs ** (-M - 2))[:, None]
    fit = fit_expansion(Y, m, hs)
    err = abs(fit.A[0] - A)
    assert err <= abs(c) * 64.0 ** (-M - 2) * fit.kappa
    # weighted normal equations written out by hand
    w2 = hs ** (2 * (M + 2))
    x = hs ** (1 / m - 2)
    N = np.array([[w2.sum(), (w2 * x).sum()], [(w2 * x).sum(), (w2 * x * x).sum()]])
    rhs = np.array([(w2 * Y[:, 0]).sum(), (w2 * x * Y[:, 0]).sum()])
    a_hand, b_hand = np.linalg.solve(N, rhs)
    assert math.isclose(fit.A[0], a_hand, rel_tol=1e-10)
    assert math.isclose(fit.B[0], b_hand, rel_tol=1e-9)
    assert fit.slope <= -(M + 2) + 0.2


def test_fit_errors():
    with pytest.raises(FitError):
        fit_expansion(np.zeros((2, 3)), 2.0, [4.0, 8.0])
    with pytest.raises(FitError):
        fit_expansion(np.zeros((3, 3)), 2.0, [4.0, 8.0, 8.0])
    with pytest.raises(FitError):
        fit_expansion(np.zeros((4, 3)), 2.0, [4.0, 8.0, 16.0])


def test_pipeline_fit_matches_oracle(unit_run):
    samples = DNSampleSet.from_results("cos1", unit_run["g"], unit_run["results"])
    fit = fit_expansion(samples, unit_run["m"])
    o = build_oracle(unit_run["eps"], unit_run["gamma"], unit_run["m"], unit_run["g"])
    S = unit_run["g"].grid.surface_weights
    rel = math.sqrt(np.sum(S * (fit.A.values - o.A.values) ** 2) / np.sum(S * o.A.values**2))
    assert rel <= 0.02
    assert fit.slope <= -(remainder_order(unit_run["m"]) + 2) + 0.2
    summary = fit.summary()
    assert summary["peel_A_change"] < 1e-2


def test_pairing_identity(unit_run):
    grid = unit_run["g"].grid
    samples = DNSampleSet.from_results("cos1", unit_run["g"], unit_run["results"])
    fit = fit_expansion(samples, unit_run["m"])
    o = build_oracle(unit_run["eps"], unit_run["gamma"], unit_run["m"], unit_run["g"])
    op = DiscreteOperator(unit_run["gamma"])
    xb = grid.coords[grid.boundary]
    lhs, rhs = [], []
    for wb in (np.ones(len(xb)), xb[:, 0], xb[:, 0] * xb[:, 1], xb[:, 0] ** 2 - xb[:, 1] ** 2):
        lhs.append(boundary_pair(fit.B, BoundaryField(grid, wb)))
        rhs.append(float(grid.node_weights @ (o.source * op.solve(wb))))
    # some pairings vanish by symmetry, so errors are measured against the largest one
    lhs, rhs = np.array(lhs), np.array(rhs)
    assert np.max(np.abs(lhs - rhs)) <= 0.03 * np.max(np.abs(rhs))


def test_verify_expansion_strict_checks(unit_run):
    o = build_oracle(unit_run["eps"], unit_run["gamma"], unit_run["m"], unit_run["g"])
    sigma, checks = verify_expansion(o, unit_run["u"], unit_run["results"])
    assert sigma > 0
    strict = [c for c in checks if c.strict]
    assert len(strict) == 1 + 3 * len(unit_run["results"])
    assert all(c.passed for c in strict), [c for c in strict if not c.passed]


def test_remainder_signs_and_slope(unit_run):
    o = build_oracle(unit_run["eps"], unit_run["gamma"], unit_run["m"], unit_run["g"])
    hs, norms = [], []
    for r in unit_run["results"]:
        R1, R2 = remainders(r, o, r.h)
        assert R1.values.max() <= 1e-9 * r.h**2
        assert R2.values.min() >= -1e-9 * r.h**2
        hs.append(r.h)
        norms.append(np.max(np.abs(R1.values)))
    assert abs(loglog_slope(hs, norms) - 1 / unit_run["m"]) <= 0.15


def test_comparison_machinery():
    t = np.linspace(0, 2, 9)
    s = smoothstep(t, 1.0)
    assert s[0] == 0 and s[-1] == 1 and np.all(np.diff(s) >= 0)
    g = make_grid(2, 1.0, 7)
    one = constant(g)
    o = build_oracle(one, one, 2.0, BoundaryField(g, np.ones(g.boundary.size)))
    times = np.linspace(0, 5, 51)
    sigma = find_sigma(times, o)
    w = comparison_function(times[times >= sigma], o, sigma)
    assert np.all(w >= 0)


def test_check_result_and_slope_helpers():
    c = CheckResult("x", 1.0, 0.5)
    assert not c.passed and c.as_dict() == {"value": 1.0, "limit": 0.5, "pass": False, "strict": True}
    assert loglog_slope([1, 10], [2, 20]) == pytest.approx(1.0)
    assert math.isnan(loglog_slope([1, 10], [0, 1]))
