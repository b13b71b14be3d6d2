"""Laplace transform of the nonlinear flow and the transformed DN map.

For boundary data ``phi = (t g)^(1/m)`` the flow ``v = u^m`` grows linearly in
time, and its transform ``V(h, x) = int_0^inf exp(-t/h) v dt`` solves the
elliptic problem ``div(gamma grad V) = N`` with ``V = h^2 g`` on the boundary,
where ``N = int_0^inf exp(-t/h) eps du/dt dt``.  ``Lambda^h = h^-2 gamma d_nu V``
is the transformed DN map.

Quadrature in time integrates the piecewise-linear interpolant of the samples
against ``exp(-t/h)`` exactly (product trapezoid rule), which is exact for
``v = t g``.  The same weights applied to the implicit Euler increments give
an ``N`` for which the discrete identity ``K V + w N = 0`` holds on interior
nodes to round-off, so the weak Neumann trace of ``V`` is well defined.  The
first-order time error of implicit Euler is removed by Richardson
extrapolation between the time grid and its every-other-stamp subgrid.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammaincc

from .elliptic import DiscreteOperator
from .fieldio import read_field, write_field
from .forward import PMEProblem, RegularizationLevel, geometric_stamps, solve_level, solve_pme
from .grid import BoundaryField, ScalarField, same_grid

log = logging.getLogger(__name__)


class TransformError(RuntimeError):
    pass


@dataclass(frozen=True)
class HSchedule:
    """Transform parameters, horizon rule ``T(h) = horizon_factor * h`` and tail switch."""

    values: tuple
    horizon_factor: float = 40.0
    tail: bool = True

    def __post_init__(self):
        vals = tuple(float(h) for h in self.values)
        if not vals:
            raise ValueError("h schedule is empty")
        if any(h <= 0 for h in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"h values must be positive and strictly increasing, got {vals}")
        if self.horizon_factor < 10:
            raise ValueError("horizon factor must be at least 10")
        object.__setattr__(self, "values", vals)

    @classmethod
    def geometric(cls, h_min, h_max, count, **kw):
        return cls(tuple(np.geomspace(h_min, h_max, count).tolist()), **kw)

    def horizon(self, h=None):
        return self.horizon_factor * (self.values[-1] if h is None else h)

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


def _phi_series(x, terms):
    """Series ``sum_{n>=2} c_n(-x)^(n-1) / n!`` helpers for small ``x``."""
    out0 = np.zeros_like(x)
    out1 = np.zeros_like(x)
    for n in range(terms, 1, -1):
        c = (-1) ** n / math.factorial(n)
        out0 = out0 + c * x ** (n - 1)
        out1 = out1 + c * (n - 1) * x ** (n - 1)
    return out0, out1


def laplace_weights(stamps, h):
    """Weights ``omega_n = int_0^T hat_n(t) exp(-t/h) dt`` of the nodal hat functions."""
    t = np.asarray(stamps, dtype=float)
    if t.ndim != 1 or t.size < 2 or t[0] != 0:
        raise ValueError("stamps must be a 1D array starting at 0")
    if not h > 0:
        raise ValueError("h must be positive")
    d = np.diff(t)
    x = d / h
    left = np.empty_like(x)
    right = np.empty_like(x)
    small = x < 0.1
    left[small], right[small] = _phi_series(x[small], 14)
    xs = x[~small]
    ex = np.exp(-xs)
    left[~small] = (xs - 1 + ex) / xs
    right[~small] = (1 - (1 + xs) * ex) / xs
    scale = h * np.exp(-t[:-1] / h)
    w = np.zeros_like(t)
    w[:-1] += scale * left
    w[1:] += scale * right
    return w


def tail_design(stamps, m=None):
    """Tail window (last decade of stamps) and basis matrix ``[t, t^(1/m - 1)]``."""
    t = np.asarray(stamps, dtype=float)
    sel = np.flatnonzero(t >= 0.1 * t[-1])
    cols = [t[sel]]
    if m is not None:
        cols.append(t[sel] ** (1.0 / m - 1.0))
    return sel, np.stack(cols, axis=1)


def tail_integrals(T, h, m=None):
    """``int_T^inf exp(-t/h) b(t) dt`` for the tail basis functions ``b``."""
    out = [h * math.exp(-T / h) * (T + h)]
    if m is not None:
        p = 1.0 / m
        out.append(h**p * float(gammaincc(p, T / h) * gamma_fn(p)))
    return np.array(out)


def _tail(values, stamps, h, m):
    sel, X = tail_design(stamps, m)
    coef = np.linalg.lstsq(X, values[sel].reshape(sel.size, -1), rcond=None)[0]
    return (tail_integrals(stamps[-1], h, m) @ coef).reshape(values.shape[1:])


def truncation_bound(values, stamps, h):
    """``exp(-T/h) h (T + h) sup|v/t|`` over the last decade: bounds the tail when ``|v| <= C t``."""
    t = np.asarray(stamps, dtype=float)
    T = t[-1]
    sel = np.flatnonzero(t >= 0.1 * T)
    slope = np.max(np.abs(values[sel]) / t[sel].reshape((-1,) + (1,) * (values.ndim - 1)), axis=0)
    return math.exp(-T / h) * h * (T + h) * slope


def laplace_of_series(values, stamps, h, tail=False, m=None):
    """Laplace transform of a sampled series at parameter ``h``.

    ``values`` has shape ``(nt,)`` or ``(nt, ...)``.  With ``tail`` the series
    is extended past the last stamp by the least-squares model
    ``a t + b t^(1/m - 1)`` (``a t`` alone when ``m`` is None) fitted on the
    last decade.  Returns ``(value, bound)`` where ``bound`` bounds the
    contribution of ``[T, inf)``.
    """
    values = np.asarray(values, dtype=float)
    stamps = np.asarray(stamps, dtype=float)
    if values.size == 0 or stamps.size == 0:
        raise ValueError("empty series")
    if not h > 0:
        raise ValueError("h must be positive")
    if values.shape[0] != stamps.size:
        raise ValueError("one value per stamp is required")
    w = laplace_weights(stamps, h)
    value = np.tensordot(w, values, axes=(0, 0))
    bound = truncation_bound(values, stamps, h)
    if tail:
        extra = _tail(values, stamps, h, m)
        value = value + extra
        bound = np.maximum(bound, np.abs(extra))
    if values.ndim == 1:
        return float(value), float(bound)
    return value, bound


def _rates(u, eps, source_lift, source=None):
    """``eps du/dt - f_k`` on each step ``n -> n + 1`` (implicit Euler form)."""
    dt = np.diff(u.times)[:, None]
    r = np.asarray(eps)[None, :] * np.diff(u.values, axis=0) / dt
    k = u.meta.get("k")
    if k is not None and source_lift:
        r = r - source_lift / k
    if source is not None:
        r = r - np.stack([source(t) for t in u.times[1:]])
    return r


def transform_arrays(u, m, h, eps=1.0, tail=True, source=None):
    """Nodal arrays ``(V, N, bound)`` for one time series ``u``."""
    grid = u.grid
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (grid.size,))
    v = u.values**m
    t = u.times
    w = laplace_weights(t, h)
    V = w @ v
    r = _rates(u, eps, u.meta.get("source_lift", 1.0), source)
    N = w[1:] @ r
    bound = truncation_bound(v, t, h)
    if tail:
        # The same linear fit is applied to v and to the step rates, so the
        # tails inherit the discrete identity between V and N.
        extra_v = _tail(v, t, h, m)
        extra_n = _tail(np.vstack([r[:1], r]), t, h, m)
        V = V + extra_v
        N = N + extra_n
        bound = np.maximum(bound, np.abs(extra_v))
    return V, N, bound


def transform_solution(u, m, h, tail=True, eps=1.0, source=None, tol=None):
    """``(V, N)`` fields of a forward solution at transform parameter ``h``.

    Raises :class:`TransformError` if the truncation bound exceeds ``tol``.
    """
    V, N, bound = transform_arrays(u, m, h, eps, tail, source)
    if tol is not None and np.max(bound) > tol:
        raise TransformError(
            f"horizon T = {u.times[-1]:.4g} too short for h = {h:.4g}: truncation bound "
            f"{np.max(bound):.3e} exceeds {tol:.3e}"
        )
    return ScalarField(u.grid, V), ScalarField(u.grid, N)


@dataclass(frozen=True)
class PipelineConfig:
    """Forward and transform settings of the ``Lambda^h`` pipeline."""

    k0: float = 4e9
    k_max: float = 6.4e10
    k_tol: float = 1e-6
    dt0: float = 1e-3
    uniform_steps: int = 20
    ratio: float = 1.02
    richardson: bool = True
    source_lift: float = 0.0

    def stamps(self, horizon):
        return geometric_stamps(horizon, self.dt0, self.uniform_steps, self.ratio)


@dataclass(eq=False)
class TransformResult:
    h: float
    V: ScalarField
    N: ScalarField
    lam: BoundaryField
    truncation: np.ndarray
    tolerance: float
    consistency: float
    meta: dict = field(default_factory=dict)


def _flux(op, V, N, h):
    tau = op.flux_functional(V, N)
    return tau / op.grid.surface_weights / h**2


def dn_samples(eps, gamma, m, g, schedule, config=None, operator=None, return_solution=False):
    """One forward run for data ``g``; transforms and DN data for every ``h``.

    ``tolerance`` of each result is the max-norm change of ``Lambda^h``
    between the extrapolated and the fine-grid values plus the truncation
    bound scaled by ``h^-2`` (``g`` enters only through ``phi = (t g)^(1/m)``).
    With ``return_solution`` the fine forward run is returned as well.
    """
    config = config or PipelineConfig()
    same_grid(eps, gamma)
    grid = gamma.grid
    gv = np.asarray(g.values, dtype=float)
    if np.any(gv < 0):
        raise ValueError("boundary data g must be nonnegative")
    op = operator or DiscreteOperator(gamma)
    T = schedule.horizon()
    stamps = config.stamps(T)

    def phi(t, gv=gv, m=m):
        return (t * gv) ** (1.0 / m)

    problem = PMEProblem(eps, gamma, m, phi, float(stamps[-1]), stamps=stamps)
    fine = solve_pme(
        problem, config.k_tol, k0=config.k0, k_max=config.k_max, times=stamps,
        source_lift=config.source_lift,
    )
    runs = [fine]
    if config.richardson:
        k = fine.meta["k"]
        level = RegularizationLevel.for_problem(problem, k, stamps)
        coarse = solve_level(problem, level, stamps[::2], operator=op, source_lift=config.source_lift)
        runs.append(coarse)
    ev = np.asarray(eps.values)
    results = []
    w_inner = grid.node_weights[grid.interior]
    for h in schedule:
        parts = [transform_arrays(u, m, h, ev, schedule.tail) for u in runs]
        Vf, Nf, bound = parts[0]
        if config.richardson:
            Vc, Nc, bound_c = parts[1]
            V, N = 2 * Vf - Vc, 2 * Nf - Nc
            bound = np.maximum(bound, bound_c)
        else:
            V, N = Vf, Nf
        lam = _flux(op, V, N, h)
        lam_f = _flux(op, Vf, Nf, h)
        tolerance = float(np.max(np.abs(lam - lam_f)) + np.max(bound) / h**2)
        resid = op.residual(V, N)
        scale = max(np.max(np.abs(w_inner * N[grid.interior]), initial=0.0), np.finfo(float).tiny)
        consistency = float(np.max(np.abs(resid), initial=0.0) / scale)
        meta = {
            "k_sequence": fine.meta["k_sequence"],
            "k_differences": fine.meta["differences"],
            "monotonicity_defect": fine.meta["monotonicity_defect"],
            "steps": int(stamps.size - 1),
            "horizon": float(stamps[-1]),
            "newton_iterations": int(sum(u.meta.get("total_newton_iterations", u.meta["newton_iterations"]) for u in runs)),
            "boundary_defect": float(np.max(np.abs(V[grid.boundary] - h**2 * gv)) / max(h**2 * np.max(np.abs(gv)), 1e-300)),
        }
        results.append(
            TransformResult(
                h, ScalarField(grid, V), ScalarField(grid, N), BoundaryField(grid, lam),
                bound, tolerance, consistency, meta,
            )
        )
    if return_solution:
        return results, fine
    return results


def lambda_h(eps, gamma, m, g, h, config=None, horizon_factor=40.0, tail=True):
    """Transformed DN data ``Lambda^h(g)`` for a single ``h``."""
    return dn_samples(eps, gamma, m, g, HSchedule((h,), horizon_factor, tail), config)[0]


@dataclass(eq=False)
class DNSampleSet:
    """``Lambda^h(g)`` for one boundary datum over an h schedule."""

    label: str
    g: BoundaryField
    hs: tuple
    lams: list
    tolerances: list = field(default_factory=list)

    @classmethod
    def from_results(cls, label, g, results):
        return cls(label, g, tuple(r.h for r in results), [r.lam for r in results],
                   [r.tolerance for r in results])

    @property
    def matrix(self):
        """Samples as an array of shape ``(len(hs), boundary nodes)``."""
        return np.stack([np.asarray(b.values) for b in self.lams])

    def write(self, directory):
        """Write ``<label>.json`` plus one boundary field file per ``h``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, lam in enumerate(self.lams):
            name = f"{self.label}_h{i:02d}.field"
            write_field(directory / name, lam)
            files.append(name)
        write_field(directory / f"{self.label}_g.field", self.g)
        doc = {
            "label": self.label,
            "g": f"{self.label}_g.field",
            "h": list(self.hs),
            "fields": files,
            "tolerances": list(self.tolerances),
        }
        path = directory / f"{self.label}.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        doc = json.loads(path.read_text())
        lams = [read_field(path.parent / f) for f in doc["fields"]]
        g = read_field(path.parent / doc["g"])
        return cls(doc["label"], g, tuple(doc["h"]), lams, doc.get("tolerances", []))

    def write_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["h", "node", "value"])
            nodes = self.g.grid.boundary
            for h, lam in zip(self.hs, self.lams):
                for node, val in zip(nodes, lam.values):
                    out.writerow([format(h, ".17g"), int(node), format(float(val), ".17g")])
