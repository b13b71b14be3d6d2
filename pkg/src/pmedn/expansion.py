"""Two-term large-``h`` expansion of the transformed DN map.

``V(h) = h^2 V0 + h^(1/m) V1 + R2`` where ``V0`` is the ``gamma``-harmonic
extension of ``g`` and ``V1`` solves ``div(gamma grad V1) = G eps V0^(1/m)``
with zero boundary values, ``G = Gamma(1 + 1/m)``.  Consequently

    Lambda^h(g) = A + h^(1/m - 2) B + O(h^(-M-2)),   M = min(1, 2 - 2/m),

with ``A = gamma d_nu V0`` (the Calderon DN map) and ``B = gamma d_nu V1``.
This module builds the oracle fields, the remainders, the regression of
``(A, B)`` from sampled DN data and a set of inequality checks along the
way (the comparison function ``w`` and the bracket ``N1 <= N <= N0``).
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad_vec

from .elliptic import DiscreteOperator
from .grid import BoundaryField, ScalarField, same_grid


class FitError(ValueError):
    pass


def gamma_one_plus(m):
    """``Gamma(1 + 1/m)``."""
    if not m > 1:
        raise ValueError("m must exceed 1")
    return math.gamma(1.0 + 1.0 / m)


def remainder_order(m):
    """``M = min(1, 2 - 2/m)``."""
    return min(1.0, 2.0 - 2.0 / m)


def nonneg_power(x, p):
    """``x^p`` with ``0^p := 0`` and tiny negative round-off clipped to 0."""
    return np.power(np.maximum(x, 0.0), p)


@dataclass(eq=False)
class ExpansionOracle:
    V0: ScalarField
    V1: ScalarField
    m: float
    gamma: ScalarField
    eps: ScalarField
    G: float
    operator: DiscreteOperator = field(repr=False, default=None)

    @property
    def source(self):
        """Right-hand side ``G eps V0^(1/m)`` of the ``V1`` problem."""
        return self.G * np.asarray(self.eps.values) * nonneg_power(self.V0.values, 1.0 / self.m)

    @property
    def A(self):
        return BoundaryField(self.V0.grid, self.operator.trace(np.asarray(self.V0.values)))

    @property
    def B(self):
        return BoundaryField(self.V0.grid, self.operator.trace(np.asarray(self.V1.values), self.source))

    def predict(self, h):
        """Two-term prediction ``A + h^(1/m - 2) B``."""
        return np.asarray(self.A.values) + h ** (1.0 / self.m - 2.0) * np.asarray(self.B.values)


def build_oracle(eps, gamma, m, g, operator=None):
    same_grid(eps, gamma)
    gv = np.asarray(g.values, dtype=float)
    if np.any(gv < 0):
        raise ValueError("g must be nonnegative")
    op = operator or DiscreteOperator(gamma)
    G = gamma_one_plus(m)
    V0 = op.solve(gv)
    rhs = G * np.asarray(eps.values) * nonneg_power(V0, 1.0 / m)
    V1 = op.solve(np.zeros_like(gv), rhs)
    grid = gamma.grid
    return ExpansionOracle(ScalarField(grid, V0), ScalarField(grid, V1), float(m), gamma, eps, G, op)


def remainders(V, oracle, h):
    """``R1 = V - h^2 V0`` and ``R2 = R1 - h^(1/m) V1``."""
    values = np.asarray(getattr(V, "V", V).values)
    R1 = values - h**2 * np.asarray(oracle.V0.values)
    R2 = R1 - h ** (1.0 / oracle.m) * np.asarray(oracle.V1.values)
    grid = oracle.V0.grid
    return ScalarField(grid, R1), ScalarField(grid, R2)


def loglog_slope(hs, norms):
    """Least-squares slope of ``log(norms)`` against ``log(hs)``."""
    hs = np.asarray(hs, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if np.any(norms <= 0):
        return float("nan")
    return float(np.polyfit(np.log(hs), np.log(norms), 1)[0])


@dataclass(eq=False)
class FitResult:
    A: BoundaryField
    B: BoundaryField
    hs: tuple
    residuals: np.ndarray  # (len(hs), nodes) misfits of the two-term model
    residual_norms: np.ndarray  # per node, weighted
    slope: float  # observed order of the misfit max-norm against h
    kappa: float
    condition: float
    peel_A: np.ndarray = None
    peel_B: np.ndarray = None
    m: float = None

    def summary(self):
        return {
            "h": list(self.hs),
            "m": self.m,
            "remainder_slope": self.slope,
            "kappa": self.kappa,
            "condition": self.condition,
            "max_residual_norm": float(np.max(self.residual_norms)),
            "peel_A_change": float(np.max(np.abs(self.peel_A - _as_array(self.A)))),
            "peel_B_change": float(np.max(np.abs(self.peel_B - _as_array(self.B)))),
        }

    def write_json(self, path):
        doc = dict(self.summary(), A=_as_array(self.A).tolist(), B=_as_array(self.B).tolist())
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    def write_residual_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["h", "residual_norm"])
            for h, r in zip(self.hs, self.residuals):
                out.writerow([format(h, ".17g"), format(float(np.max(np.abs(r))), ".17g")])


def fit_operator(hs, m):
    """Rows ``(L_A, L_B)`` with ``A = L_A @ Y`` and ``B = L_B @ Y``, plus the condition number.

    The fit is linear in the samples, so these rows also propagate sample
    errors into ``A`` and ``B``.
    """
    hs = np.asarray(hs, dtype=float)
    p = 1.0 / m - 2.0
    X = np.stack([np.ones_like(hs), hs**p], axis=1)
    wts = hs ** (remainder_order(m) + 2)
    Xw = X * wts[:, None]
    sv = np.linalg.svd(Xw, compute_uv=False)
    condition = float(sv[0] / sv[-1])
    if not np.isfinite(condition) or condition > 1e12:
        raise FitError(f"design is collinear (condition {condition:.3g}); spread the h values")
    return np.linalg.pinv(Xw) * wts[None, :], condition


def fit_expansion(samples, m, hs=None):
    """Fit ``Lambda^h = A + h^(1/m - 2) B`` node by node.

    ``samples`` is a :class:`~pmedn.laplace.DNSampleSet` or an array of shape
    ``(len(hs), nodes)``.  Each node is a weighted least-squares problem
    with weights ``h^(M + 2)``, the inverse size of the neglected terms.
    ``kappa`` bounds the error in ``A`` caused by a remainder ``c h^(-M-2)``
    as ``|c| * h_max^(-M-2) * kappa``.
    """
    grid = None
    if hasattr(samples, "matrix"):
        hs, Y, grid = samples.hs, samples.matrix, samples.g.grid
    else:
        Y = np.asarray(samples, dtype=float)
    hs = np.asarray(hs, dtype=float)
    if hs.size < 3 or np.unique(hs).size < 3:
        raise FitError("need at least 3 distinct h values")
    if Y.shape[0] != hs.size:
        raise FitError("one sample row per h value is required")
    M = remainder_order(m)
    p = 1.0 / m - 2.0
    X = np.stack([np.ones_like(hs), hs**p], axis=1)
    wts = hs ** (M + 2)
    Lop, condition = fit_operator(hs, m)
    coef = Lop @ Y
    L = Lop[0]
    kappa = float(np.sum(np.abs(L) * hs ** (-M - 2)) / hs.max() ** (-M - 2))
    resid = Y - X @ coef
    norms = np.sqrt(np.sum((wts[:, None] * resid) ** 2, axis=0))
    slope = loglog_slope(hs, np.max(np.abs(resid), axis=1))
    # Peeling: A from the largest h, then B by least squares on the rest.
    order = np.argsort(hs)
    peel_A = Y[order[-1]]
    rest = order[:-1]
    basis = hs[rest] ** p
    peel_B = basis @ (Y[rest] - peel_A) / (basis @ basis)
    A, B = coef
    if grid is not None:
        A, B = BoundaryField(grid, A), BoundaryField(grid, B)
    return FitResult(
        A, B, tuple(hs.tolist()), resid, norms, slope, kappa, condition, peel_A, peel_B, float(m)
    )


def _as_array(x):
    return np.asarray(getattr(x, "values", x), dtype=float)


def smoothstep(t, sigma):
    """Non-decreasing ``C^1`` cutoff: 0 for ``t <= sigma/2``, 1 for ``t >= sigma``."""
    s = np.clip((np.asarray(t, dtype=float) - 0.5 * sigma) / (0.5 * sigma), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def comparison_profile(t, oracle):
    """``q(t) = t V0 + Gamma(1/m)^-1 t^(1/m - 1) V1`` at times ``t`` (rows)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
    m = oracle.m
    V0 = np.asarray(oracle.V0.values)[None, :]
    V1 = np.asarray(oracle.V1.values)[None, :]
    safe = np.where(t > 0, t, 1.0)
    q = t * V0 + safe ** (1.0 / m - 1.0) * V1 / math.gamma(1.0 / m)
    return np.where(t > 0, q, -np.inf)


def find_sigma(times, oracle):
    """Smallest positive stamp from which ``q >= 0`` at every node and every later stamp."""
    times = np.asarray(times, dtype=float)
    pos = times[times > 0]
    ok = np.all(comparison_profile(pos, oracle) >= 0, axis=1)
    bad = np.flatnonzero(~ok)
    if bad.size == 0:
        return float(pos[0])
    if bad[-1] + 1 >= pos.size:
        raise ValueError("comparison profile stays negative up to the last stamp")
    return float(pos[bad[-1] + 1])


def comparison_function(t, oracle, sigma):
    """``w = chi(t)^m q(t)`` with the smoothstep cutoff ``chi``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    chi = smoothstep(t, sigma)[:, None]
    q = comparison_profile(np.maximum(t, 0.5 * sigma), oracle)
    return chi**oracle.m * q


def n0_field(oracle, h):
    """``N0 = G eps h^(1/m) V0^(1/m)``."""
    return h ** (1.0 / oracle.m) * oracle.source


def n1_field(oracle, h, sigma):
    """``N1 = h^-1 eps int_sigma^inf exp(-t/h) q(t)^(1/m) dt`` by adaptive quadrature."""
    m = oracle.m

    def integrand(s):
        t = sigma + s
        return math.exp(-t / h) * nonneg_power(comparison_profile(t, oracle)[0], 1.0 / m)

    val, _ = quad_vec(integrand, 0.0, np.inf, epsabs=1e-13, epsrel=1e-10)
    return np.asarray(oracle.eps.values) * val / h


@dataclass
class CheckResult:
    """One inequality check; ``strict`` ones count as invariants, the rest are diagnostics."""

    name: str
    value: float
    limit: float
    strict: bool = True

    @property
    def passed(self):
        return bool(self.value <= self.limit)

    def as_dict(self):
        return {
            "value": float(self.value),
            "limit": float(self.limit),
            "pass": self.passed,
            "strict": self.strict,
        }


def verify_expansion(oracle, u, results, slack=1e-9):
    """Sign and ordering checks for one forward run and its transforms.

    ``u`` is the forward solution (a :class:`~pmedn.grid.TimeField` of the
    boundary data ``(t g)^(1/m)``) and ``results`` the transform results.
    Every check reports a value that must not exceed its limit.  The
    comparison ``w <= v`` and the bound ``N1 <= N`` are reported as
    non-strict diagnostics: ``w`` is built from the large-time profile and
    overshoots ``v`` at moderate times (see the README).
    """
    checks = []
    V1 = np.asarray(oracle.V1.values)
    checks.append(CheckResult("V1 <= 0", float(np.max(V1)), slack))
    sigma = find_sigma(u.times, oracle)
    later = u.times >= sigma
    w = comparison_function(u.times[later], oracle, sigma)
    v = u.values[later] ** oracle.m
    scale = np.maximum(1.0, u.times[later])[:, None]
    checks.append(
        CheckResult("w <= v for t >= sigma", float(np.max((w - v) / scale)), slack, strict=False)
    )
    for r in results:
        h = r.h
        R1, R2 = remainders(r.V, oracle, h)
        N = _as_array(r.N)
        N0 = n0_field(oracle, h)
        N1 = n1_field(oracle, h, sigma)
        checks.append(CheckResult(f"R1 <= 0 (h={h:g})", float(np.max(R1.values)) / h**2, slack))
        checks.append(CheckResult(f"R2 >= 0 (h={h:g})", float(np.max(-R2.values)) / h**2, slack))
        checks.append(CheckResult(f"N <= N0 (h={h:g})", float(np.max(N - N0)), slack))
        checks.append(CheckResult(f"N1 <= N (h={h:g})", float(np.max(N1 - N)), slack, strict=False))
    return sigma, checks
