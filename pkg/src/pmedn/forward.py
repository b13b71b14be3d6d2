"""Forward solver for ``eps du/dt - div(gamma grad u^m) = f`` with ``u(0) = 0``.

Weak solutions are built as monotone limits of regularised problems.  Level
``k`` starts from ``u = 1/k``, lifts the boundary data and the source by
``1/k`` and clamps the mobility ``m gamma lambda^(m-1)`` to a window
``[1/k, lambda_max]``, which makes the problem uniformly parabolic.  Inside
the window the regularised flux is exactly ``gamma grad u^m``.

Space is discretised with the elliptic module's finite-volume operator applied
to the Kirchhoff potential ``Phi_k(u)`` (``Phi_k' = m clamp(u)^(m-1)``, and
``Phi_k(u) = u^m`` on the window), so every time step is the nonlinear system

    eps w (u^{n+1} - u^n) / dt + K Phi_k(u^{n+1}) = w f_k      (interior nodes)

solved by damped Newton.  The Jacobian ``diag(eps w / dt) + K diag(Phi_k')``
is an M-matrix, which gives the discrete maximum and comparison principles.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elliptic import DiscreteOperator
from .grid import GridError, ScalarField, TimeField, same_grid

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAXIT = 50
MAX_HALVINGS = 8
K0 = 100
K_MAX = 1e9


class ForwardError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PMEProblem:
    """Coefficients, exponent, data and time grid of one forward run.

    ``boundary(t)`` returns the Dirichlet data on the boundary nodes and
    ``source(t)`` the nodal source (``None`` means zero).  The time grid is
    ``stamps`` if given, else ``steps`` uniform steps on ``[0, horizon]``,
    else the default rule of :func:`default_steps`.
    """

    eps: ScalarField
    gamma: ScalarField
    m: float
    boundary: object
    horizon: float
    steps: int = None
    source: object = None
    stamps: np.ndarray = None

    def __post_init__(self):
        same_grid(self.eps, self.gamma)
        if not self.m >= 1:
            raise ValueError(f"m must be >= 1 (m > 1 for the porous medium equation), got {self.m}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        for name in ("eps", "gamma"):
            vals = getattr(self, name).values
            if not np.all(vals > 0):
                raise ValueError(f"{name} must be positive")
        phi0 = np.asarray(self.boundary(0.0), dtype=float)
        if phi0.shape != (self.grid.boundary.size,):
            raise GridError("boundary data must give one value per boundary node")
        if np.any(phi0 != 0):
            raise ValueError("boundary data must vanish at t = 0")
        if self.stamps is not None:
            st = np.asarray(self.stamps, dtype=float)
            if st[0] != 0 or np.any(np.diff(st) <= 0) or not math.isclose(st[-1], self.horizon):
                raise ValueError("stamps must increase from 0 to the horizon")

    @property
    def grid(self):
        return self.eps.grid

    def phi(self, t):
        return np.asarray(self.boundary(t), dtype=float)

    def f(self, t):
        if self.source is None:
            return np.zeros(self.grid.size)
        if callable(self.source):
            return np.broadcast_to(np.asarray(self.source(t), dtype=float), (self.grid.size,))
        return np.full(self.grid.size, float(self.source))


@dataclass(frozen=True)
class RegularizationLevel:
    k: float
    lam_min: float
    lam_max: float

    @classmethod
    def for_problem(cls, problem, k, times=None):
        times = problem_times(problem, k) if times is None else times
        sup_phi, sup_f = data_sups(problem, times)
        T = times[-1]
        return cls(float(k), 1.0 / k, sup_phi + T * sup_f + (1.0 + T) / k)


def data_sups(problem, times):
    sup_phi = max(float(np.max(problem.phi(t), initial=0.0)) for t in times)
    sup_f = max(float(np.max(problem.f(t), initial=0.0)) for t in times)
    return sup_phi, sup_f


def mobility(gamma_value, lam, level, m):
    """Clamped mobility ``m gamma clamp(lam)^(m-1)``."""
    lt = np.clip(lam, level.lam_min, level.lam_max)
    return m * gamma_value * lt ** (m - 1)


def kirchhoff(u, level, m):
    """Potential with derivative ``m clamp(u)^(m-1)``; equals ``u^m`` on the window."""
    lo, hi = level.lam_min, level.lam_max
    uc = np.clip(u, lo, hi)
    return uc**m + m * uc ** (m - 1) * (u - uc)


def kirchhoff_prime(u, level, m):
    return m * np.clip(u, level.lam_min, level.lam_max) ** (m - 1)


def default_steps(problem, level):
    """Uniform step count with ``dt <= dx^2 / (2 m sup(gamma) lam_max^(m-1))``."""
    dx = min(problem.grid.spacing)
    rate = 2 * problem.m * float(np.max(problem.gamma.values)) * level.lam_max ** (problem.m - 1)
    return max(1, int(math.ceil(problem.horizon * rate / dx**2)))


def problem_times(problem, k=K0):
    if problem.stamps is not None:
        return np.asarray(problem.stamps, dtype=float)
    steps = problem.steps
    if steps is None:
        T = problem.horizon
        probe = np.linspace(0.0, T, 65)
        sup_phi, sup_f = data_sups(problem, probe)
        level = RegularizationLevel(float(k), 1.0 / k, sup_phi + T * sup_f + (1.0 + T) / k)
        steps = default_steps(problem, level)
    return np.linspace(0.0, problem.horizon, steps + 1)


def geometric_stamps(horizon, dt0=1e-3, uniform_steps=20, ratio=1.02):
    """Uniform start-up phase followed by geometrically growing steps.

    The step count is even, so every other stamp gives a coarse grid with
    twice the step sizes (up to a factor ``1 + ratio``), used for Richardson
    extrapolation in time.
    """
    ts = [0.0]
    uniform_steps += uniform_steps % 2
    for _ in range(uniform_steps):
        ts.append(ts[-1] + dt0)
    dt = dt0
    while ts[-1] < horizon or (len(ts) - 1) % 2:
        dt *= ratio
        ts.append(ts[-1] + dt)
    return np.array(ts)


class _Stepper:
    """Implicit Euler steps for one regularisation level."""

    def __init__(self, problem, level, operator=None, source_lift=1.0):
        self.p = problem
        self.lift = source_lift / level.k
        self.level = level
        self.m = float(problem.m)
        grid = problem.grid
        self.op = operator or DiscreteOperator(problem.gamma)
        self.inner = grid.interior
        self.bnd = grid.boundary
        self.w = grid.node_weights[self.inner]
        self.eps_w = np.asarray(problem.eps.values)[self.inner] * self.w
        K = self.op.K_II
        self.K = K
        self.K_IB = self.op.K_IB
        self._cols = np.repeat(np.arange(K.shape[1]), np.diff(K.indptr))
        self._diag = np.flatnonzero(K.indices == self._cols)
        self.newton_iterations = []
        self.halvings = 0

    def residual(self, u, u_old, dt, fk, vB):
        v = kirchhoff(u, self.level, self.m)
        return self.eps_w * (u - u_old) / dt + self.K @ v + self.K_IB @ vB - self.w * fk

    def jacobian(self, u, dt):
        d = kirchhoff_prime(u, self.level, self.m)
        data = self.K.data * d[self._cols]
        data[self._diag] += self.eps_w / dt
        return sp.csc_matrix((data, self.K.indices, self.K.indptr), shape=self.K.shape)

    def newton(self, u_old, t_new, dt):
        k = self.level.k
        uB = self.p.phi(t_new) + 1.0 / k
        vB = kirchhoff(uB, self.level, self.m)
        fk = self.p.f(t_new)[self.inner] + self.lift
        u = u_old.copy()
        F = self.residual(u, u_old, dt, fk, vB)
        fnorm = np.max(np.abs(F))
        for it in range(NEWTON_MAXIT + 1):
            scale = np.max(np.abs(self.eps_w * (u - u_old) / dt)) + np.max(np.abs(self.w * fk))
            if fnorm <= NEWTON_TOL * scale:
                self.newton_iterations.append(it)
                return u, uB
            if it == NEWTON_MAXIT:
                break
            delta = spla.splu(self.jacobian(u, dt)).solve(-F)
            lam = 1.0
            while True:
                trial = u + lam * delta
                F_trial = self.residual(trial, u_old, dt, fk, vB)
                tnorm = np.max(np.abs(F_trial))
                if tnorm < fnorm or lam < 1e-3:
                    break
                lam *= 0.5
            stalled = np.max(np.abs(lam * delta)) <= 1e-15 * max(1.0, np.max(np.abs(u)))
            u, F, fnorm = trial, F_trial, tnorm
            if stalled:
                self.newton_iterations.append(it + 1)
                return u, uB
        raise ForwardError(
            f"Newton did not converge at t = {t_new:.6g} (dt = {dt:.3g}): residual "
            f"{fnorm:.3e} vs scale {scale:.3e}"
        )

    def advance(self, u_old, t_old, t_new, depth=0):
        try:
            return self.newton(u_old, t_new, t_new - t_old)
        except ForwardError:
            if depth >= MAX_HALVINGS:
                raise
        self.halvings += 1
        t_mid = 0.5 * (t_old + t_new)
        u_mid, _ = self.advance(u_old, t_old, t_mid, depth + 1)
        return self.advance(u_mid, t_mid, t_new, depth + 1)


def solve_level(problem, level, times=None, operator=None, source_lift=1.0):
    """Regularised solution ``u_k`` at the stamps of the problem's time grid.

    The source is ``f_k = f + source_lift / k``; any ``source_lift`` in
    ``[0, 1]`` keeps ``f <= f_k <= f + 1/k``.
    """
    if not 0.0 <= source_lift <= 1.0:
        raise ValueError("source_lift must lie in [0, 1]")
    times = problem_times(problem, level.k) if times is None else np.asarray(times, float)
    grid = problem.grid
    stepper = _Stepper(problem, level, operator, source_lift)
    out = np.empty((times.size, grid.size))
    u_full = np.full(grid.size, 1.0 / level.k)
    out[0] = u_full
    u = u_full[stepper.inner].copy()
    for n in range(1, times.size):
        u, uB = stepper.advance(u, times[n - 1], times[n])
        out[n, stepper.inner] = u
        out[n, stepper.bnd] = uB
    meta = {
        "k": level.k,
        "source_lift": float(source_lift),
        "window": [level.lam_min, level.lam_max],
        "newton_iterations": int(np.sum(stepper.newton_iterations)),
        "max_newton_iterations": int(np.max(stepper.newton_iterations, initial=0)),
        "halvings": stepper.halvings,
    }
    u_field = TimeField(grid, times, out, meta)
    meta["max_principle_defect"] = max_principle_defect(problem, level, u_field)
    return u_field


def max_principle_defect(problem, level, u):
    """Largest violation of ``1/k <= u_k <= 1/k + sup phi + t sup f_k`` (0 if none)."""
    sup_phi, sup_f = data_sups(problem, u.times)
    lift = u.meta.get("source_lift", 1.0) / level.k
    upper = 1.0 / level.k + sup_phi + u.times * (sup_f + lift)
    low = np.max(1.0 / level.k - u.values, initial=0.0)
    high = np.max(u.values - upper[:, None], initial=0.0)
    return float(max(low, high, 0.0))


def solve_pme(problem, tol, k0=K0, k_max=K_MAX, times=None, source_lift=1.0, min_levels=2):
    """Monotone limit over ``k = k0, 2 k0, 4 k0, ...`` until successive iterates agree to ``tol``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    times = problem_times(problem, k0) if times is None else np.asarray(times, float)
    op = DiscreteOperator(problem.gamma)
    k = float(k0)
    prev = None
    ks, diffs, defects = [], [], []
    newton = 0
    while True:
        if k > k_max:
            raise ForwardError(
                f"k-sequence exhausted (k > {k_max:.3g}) with last difference "
                f"{diffs[-1] if diffs else float('nan'):.3e} > tol {tol:.3e}"
            )
        level = RegularizationLevel.for_problem(problem, k, times)
        cur = solve_level(problem, level, times, operator=op, source_lift=source_lift)
        newton += cur.meta["newton_iterations"]
        ks.append(k)
        if prev is not None:
            diffs.append(float(np.max(np.abs(cur.values - prev.values))))
            defects.append(float(np.max(cur.values - prev.values)))
            log.debug("k=%g diff=%.3e", k, diffs[-1])
            if diffs[-1] <= tol and len(ks) >= min_levels:
                break
        prev = cur
        k *= 2
    meta = dict(cur.meta)
    meta.update(
        k_sequence=ks,
        differences=diffs,
        monotonicity_defect=max(0.0, max(defects)),
        total_newton_iterations=newton,
    )
    return TimeField(cur.grid, cur.times, cur.values, meta)


def step_fluxes(problem, u, k):
    """Boundary flux functionals of every step and the conservation defect.

    Returns ``(flux, defect)`` where ``flux[n]`` is the nodal boundary trace of
    step ``n -> n+1`` and ``defect[n] = |int eps du - dt (int f_k + <flux, 1>)|``.
    """
    grid = problem.grid
    level = RegularizationLevel(float(k), 1.0 / k, u.meta.get("window", [0, np.inf])[1])
    lift = u.meta.get("source_lift", 1.0) / k
    op = DiscreteOperator(problem.gamma)
    eps = np.asarray(problem.eps.values)
    w = grid.node_weights
    fluxes, defects = [], []
    for n in range(len(u) - 1):
        dt = u.times[n + 1] - u.times[n]
        du = u.values[n + 1] - u.values[n]
        fk = problem.f(u.times[n + 1]) + lift
        rhs = eps * du / dt - fk
        v = kirchhoff(u.values[n + 1], level, problem.m)
        tau = op.flux_functional(v, rhs)
        fluxes.append(tau / grid.surface_weights)
        lhs = float(w @ (eps * du))
        rhs_total = dt * (float(w @ fk) + float(tau.sum()))
        defects.append(abs(lhs - rhs_total) / max(abs(lhs), abs(rhs_total), 1e-300))
    return np.array(fluxes), np.array(defects)


def energy_norm(u, m):
    """``||grad(u^m)||`` in ``L2(Q_T)``: central differences, trapezoid in space and time."""
    grid = u.grid
    w = grid.node_weights
    per_time = np.empty(len(u))
    for n in range(len(u)):
        v = np.asarray(u.values[n]).reshape(grid.counts) ** m
        grads = np.gradient(v, *grid.spacing, edge_order=2)
        if grid.dimension == 1:
            grads = [grads]
        sq = sum(g**2 for g in grads).ravel()
        per_time[n] = w @ sq
    return float(np.sqrt(np.trapezoid(per_time, u.times)))


@dataclass
class InvariantReport:
    """Outcomes of the scheme checks for a forward run."""

    checks: dict = field(default_factory=dict)

    def add(self, name, value, limit):
        self.checks[name] = {"value": float(value), "limit": float(limit), "pass": bool(value <= limit)}

    @property
    def passed(self):
        return all(c["pass"] for c in self.checks.values())
