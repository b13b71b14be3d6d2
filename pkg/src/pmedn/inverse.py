"""Reconstruction of ``gamma`` from the leading DN term and of ``eps`` from moments.

``gamma`` is found by output least squares on the Calderon data
``A_i = Lambda_gamma(g_i)``: Gauss-Newton with an adjoint Jacobian, a
gradient penalty and projection onto the positivity bounds.  ``eps`` then
follows from the moments ``mu_ij = int eps H_i W_j``, obtained by
differentiating the second DN term along ``g = 1 + s H``; the moments are
linear in ``eps`` and are inverted by Tikhonov-regularised least squares.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elliptic import DiscreteOperator, face_data, stiffness
from .expansion import fit_expansion, fit_operator, gamma_one_plus
from .grid import BoundaryField, ScalarField, boundary_pair

log = logging.getLogger(__name__)


class InverseError(RuntimeError):
    pass


def gradient_penalty_matrix(grid):
    """``L`` with ``e^T L e`` the discrete ``int |grad e|^2``."""
    return stiffness(ScalarField(grid, np.ones(grid.size))).tocsc()


def gradient_difference_matrix(grid):
    """``D`` (one row per face) with ``D^T D`` equal to :func:`gradient_penalty_matrix`."""
    i, j, geom = face_data(grid)
    nf = i.size
    w = np.sqrt(geom)
    rows = np.concatenate([np.arange(nf)] * 2)
    return sp.csr_matrix((np.concatenate([w, -w]), (rows, np.concatenate([i, j]))), shape=(nf, grid.size))


def discrepancy_choice(path, target):
    """Largest ``alpha`` whose misfit is at most ``target`` (else the smallest ``alpha``)."""
    for entry in path:
        if entry["misfit"] <= target:
            return entry
    return path[-1]


# --------------------------------------------------------------------------- gamma


@dataclass(eq=False)
class GammaInverseProblem:
    """Dirichlet data ``g_i`` with measured ``A_i``; nodal unknown ``gamma``.

    ``noise`` is the expected boundary-L2 size of the data error summed over
    all data (used by the discrepancy principle); ``alphas`` is scanned from
    large to small unless ``alpha`` is fixed.
    """

    basis: list
    data: list
    bounds: tuple = (0.1, 10.0)
    alpha: float = None
    alphas: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
    noise: float = 0.0
    tau: float = 1.5
    max_iter: int = 30
    gtol: float = 1e-6

    def __post_init__(self):
        if len(self.basis) != len(self.data) or not self.basis:
            raise ValueError("need one measurement per Dirichlet datum")
        lo, hi = self.bounds
        if not 0 < lo < hi:
            raise ValueError("gamma bounds must be positive and ordered")
        grid = self.grid
        n_param = grid.size
        if 4 * len(self.basis) * grid.boundary.size < n_param:
            log.info("data count %d small relative to %d unknowns", len(self.basis), n_param)

    @property
    def grid(self):
        return self.basis[0].grid


@dataclass(eq=False)
class GammaResult:
    gamma: ScalarField
    alpha: float
    misfit: float
    iterations: int
    gradient_ratio: float
    path: list = field(default_factory=list)
    initial_constant: float = None

    def summary(self):
        return {
            "alpha": self.alpha,
            "misfit": self.misfit,
            "iterations": self.iterations,
            "gradient_ratio": self.gradient_ratio,
            "initial_constant": self.initial_constant,
            "path": self.path,
        }


class _GammaModel:
    """Forward map ``gamma -> [Lambda_gamma g_i]`` and its Jacobian."""

    def __init__(self, grid, G):
        self.grid = grid
        self.G = G  # (nb, ndata)
        self.i, self.j, self.geom = face_data(grid)
        self.S = grid.surface_weights

    def evaluate(self, gvals, jacobian=False):
        gamma = ScalarField(self.grid, gvals)
        op = DiscreteOperator(gamma)
        V = op.solve(self.G)
        F = op.trace(V)
        if not jacobian:
            return F, None
        nb = self.grid.boundary.size
        Z = op.solve(np.eye(nb))  # harmonic extensions of the boundary hat functions
        gi, gj = gvals[self.i], gvals[self.j]
        s = (gi + gj) ** 2
        di = self.geom * 2 * gj**2 / s  # d(face coefficient)/d(gamma_i)
        dj = self.geom * 2 * gi**2 / s
        nf = self.i.size
        P = sp.csr_matrix(
            (np.concatenate([di, dj]), (np.concatenate([np.arange(nf)] * 2), np.concatenate([self.i, self.j]))),
            shape=(nf, self.grid.size),
        )
        dZ = Z[self.i] - Z[self.j]  # (nf, nb)
        blocks = []
        for c in range(self.G.shape[1]):
            dV = V[self.i, c] - V[self.j, c]
            Jc = (P.T @ (dV[:, None] * dZ)).T  # (nb, n)
            blocks.append(Jc / self.S[:, None])
        return F, np.vstack(blocks)


def best_constant(basis, data):
    """Least-squares constant ``c`` with ``Lambda_c = c Lambda_1``."""
    grid = basis[0].grid
    op = DiscreteOperator(ScalarField(grid, np.ones(grid.size)))
    G = np.stack([b.values for b in basis], axis=1)
    F1 = op.trace(op.solve(G))
    D = np.stack([d.values for d in data], axis=1)
    S = grid.surface_weights[:, None]
    return float(np.sum(S * F1 * D) / np.sum(S * F1 * F1))


def _gauss_newton(model, D, L, alpha, start, bounds, max_iter, gtol):
    S = np.tile(model.S, D.shape[1])
    d = D.T.ravel()
    x = start.copy()

    def objective(x, F):
        r = F.T.ravel() - d
        return 0.5 * float(np.sum(S * r * r)) + 0.5 * alpha * float(x @ (L @ x)), r

    F, J = model.evaluate(x, jacobian=True)
    obj, r = objective(x, F)
    g0 = None
    it = 0
    ratio = 1.0
    for it in range(1, max_iter + 1):
        grad = J.T @ (S * r) + alpha * (L @ x)
        gnorm = float(np.linalg.norm(grad))
        if g0 is None:
            g0 = max(gnorm, np.finfo(float).tiny)
        ratio = gnorm / g0
        if ratio <= gtol:
            break
        H = J.T @ (S[:, None] * J) + alpha * L.toarray()
        H[np.diag_indices_from(H)] += 1e-12 * np.trace(H) / H.shape[0]
        step = np.linalg.solve(H, -grad)
        lam = 1.0
        while lam > 1e-4:
            trial = np.clip(x + lam * step, *bounds)
            F_trial, _ = model.evaluate(trial)
            obj_trial, _ = objective(trial, F_trial)
            if obj_trial < obj:
                break
            lam *= 0.5
        else:
            break  # no descent: stationary within the line search resolution
        x = trial
        F, J = model.evaluate(x, jacobian=True)
        obj_new, r = objective(x, F)
        if abs(obj - obj_new) <= 1e-15 * max(obj, 1e-300):
            obj = obj_new
            break
        obj = obj_new
    misfit = math.sqrt(float(np.sum(S * r * r)))
    return x, misfit, it, ratio


def recover_gamma(problem):
    """Regularised Gauss-Newton reconstruction of nodal ``gamma``."""
    grid = problem.grid
    G = np.stack([np.asarray(b.values) for b in problem.basis], axis=1)
    D = np.stack([np.asarray(a.values) for a in problem.data], axis=1)
    model = _GammaModel(grid, G)
    L = gradient_penalty_matrix(grid)
    c0 = float(np.clip(best_constant(problem.basis, problem.data), *problem.bounds))
    x = np.full(grid.size, c0)
    alphas = [problem.alpha] if problem.alpha is not None else list(problem.alphas)
    target = problem.tau * problem.noise
    path = []
    chosen = None
    for alpha in alphas:
        x, misfit, its, ratio = _gauss_newton(
            model, D, L, alpha, x, problem.bounds, problem.max_iter, problem.gtol
        )
        entry = {"alpha": alpha, "misfit": misfit, "iterations": its, "gradient_ratio": ratio,
                 "seminorm": math.sqrt(max(float(x @ (L @ x)), 0.0))}
        path.append(entry)
        log.debug("gamma alpha=%g misfit=%.3e its=%d", alpha, misfit, its)
        if chosen is None and misfit <= target:
            chosen = (entry, x.copy())
            break
    if chosen is None:
        chosen = (path[-1], x.copy())
    entry, x = chosen
    return GammaResult(
        ScalarField(grid, x), entry["alpha"], entry["misfit"], entry["iterations"],
        entry["gradient_ratio"], path, c0,
    )


# --------------------------------------------------------------------------- eps


@dataclass(eq=False)
class MomentSystem:
    """Moments ``mu[i, j] ~ int eps H_i W_j`` with the families that define them."""

    H: list
    W: list
    mu: np.ndarray
    s_step: list
    G: float
    labels_H: list = None
    labels_W: list = None
    bias: np.ndarray = None

    def rows(self):
        """Quadrature rows ``w * H_i * W_j``: ``rows @ eps`` gives the modelled moments."""
        w = self.H[0].grid.node_weights
        return np.stack(
            [w * np.asarray(h.values) * np.asarray(v.values) for h in self.H for v in self.W]
        )

    def to_json(self, path):
        doc = {
            "G": self.G,
            "s_step": list(map(float, self.s_step)),
            "labels_H": self.labels_H,
            "labels_W": self.labels_W,
            "mu": np.asarray(self.mu).tolist(),
            "bias": None if self.bias is None else np.asarray(self.bias).tolist(),
            "H": [np.asarray(h.values).tolist() for h in self.H],
            "W": [np.asarray(v.values).tolist() for v in self.W],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def from_json(cls, path, grid):
        with open(path) as fh:
            doc = json.load(fh)
        H = [ScalarField(grid, v) for v in doc["H"]]
        W = [ScalarField(grid, v) for v in doc["W"]]
        bias = None if doc.get("bias") is None else np.array(doc["bias"])
        return cls(H, W, np.array(doc["mu"]), doc["s_step"], doc["G"], doc.get("labels_H"),
                   doc.get("labels_W"), bias)


def default_s_step(H):
    return 0.1 / float(np.max(np.abs(H.values)))


def moment_from_b(B_plus, B_minus, W, s, m):
    """``m [<B(+s), W> - <B(-s), W>] / (2 s Gamma(1 + 1/m))``."""
    W = [W] if isinstance(W, (ScalarField, BoundaryField)) else W
    out = []
    for w in W:
        wb = w if isinstance(w, BoundaryField) else w.trace()
        out.append(m * (boundary_pair(B_plus, wb) - boundary_pair(B_minus, wb)) / (2 * s * gamma_one_plus(m)))
    return np.array(out)


def central_difference_bias(H, m, s):
    """Relative size of the ``O(s^2)`` bias of the central difference in ``s``."""
    a = s * float(np.max(np.abs(H.values)))
    return a**2 * abs((1 - 1 / m) * (2 - 1 / m)) / 6


def epsilon_moment(sampler, m, H, W, s_step=None):
    """Moments ``int eps H W`` for one positive harmonic ``H`` and a family ``W``.

    ``sampler(g)`` returns a DN sample set (``Lambda^h(g)`` over an h
    schedule) for boundary data ``g``; it is called for ``g = 1 + s H`` and
    ``g = 1 - s H``.  Returns ``(moments, bias)`` where ``bias`` is the
    relative central-difference bias estimate.
    """
    s = default_s_step(H) if s_step is None else float(s_step)
    hb = np.asarray(H.values)[H.grid.boundary]
    if np.min(1 - s * np.abs(hb)) <= 0:
        raise InverseError("1 + s H loses positivity on the boundary; reduce s_step")
    grid = H.grid
    fits = []
    for sign in (1.0, -1.0):
        samples = sampler(BoundaryField(grid, 1 + sign * s * hb))
        fits.append(fit_expansion(samples, m))
    return moment_from_b(fits[0].B, fits[1].B, W, s, m), central_difference_bias(H, m, s)


def sample_uncertainty(samples, m, noise=0.0):
    """Per-node error scales of the fitted ``(A, B)`` of one sample set.

    Returns ``(dA, dB, sA, sB)``: deterministic bounds from the pipeline
    tolerances (worst-case sum over ``h``) and standard deviations from
    multiplicative sample noise of relative size ``noise``.
    """
    L, _ = fit_operator(samples.hs, m)
    tol = np.asarray(samples.tolerances, dtype=float)
    if tol.size != len(samples.hs):
        tol = np.zeros(len(samples.hs))
    det = np.abs(L) @ tol  # (2,) uniform over nodes
    sd = noise * np.abs(samples.matrix)  # (nh, nodes)
    stat = np.sqrt((L**2) @ sd**2)  # (2, nodes)
    nb = samples.matrix.shape[1]
    return np.full(nb, det[0]), np.full(nb, det[1]), stat[0], stat[1]


def moment_uncertainty(plus, minus, W, s, m, noise=0.0):
    """Error scale of the moments of :func:`epsilon_moment` for each ``W``.

    Combines the pipeline-tolerance bound and the noise standard deviation
    (in quadrature) through the linear maps sample -> ``B`` -> moment.
    """
    c = m / (2 * s * gamma_one_plus(m))
    _, dBp, _, sBp = sample_uncertainty(plus, m, noise)
    _, dBm, _, sBm = sample_uncertainty(minus, m, noise)
    S = plus.g.grid.surface_weights
    out = []
    for w in W:
        wb = np.asarray(w.trace().values if isinstance(w, ScalarField) else w.values)
        det = c * float(np.sum(S * np.abs(wb) * (dBp + dBm)))
        stat = c * math.sqrt(float(np.sum((S * wb) ** 2 * (sBp**2 + sBm**2))))
        out.append(math.hypot(det, stat))
    return np.array(out)


@dataclass(eq=False)
class EpsilonResult:
    eps: ScalarField
    alpha: float
    residual: float
    effective_rank: int
    path: list = field(default_factory=list)

    def summary(self):
        return {
            "alpha": self.alpha,
            "residual": self.residual,
            "effective_rank": self.effective_rank,
            "path": self.path,
        }


def recover_epsilon(system, grid, alpha=None, bounds=(1e-3, 1e3), noise=0.0, tau=1.5,
                    alphas=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10)):
    """Tikhonov least squares for nodal ``eps`` from a moment system.

    ``alpha`` is fixed if given, else chosen by the discrepancy principle
    against ``noise`` (expected Euclidean size of the moment errors).
    """
    R = system.rows()
    mu = np.asarray(system.mu, dtype=float).ravel()
    if R.shape[0] < 6:
        raise InverseError("need at least 6 moments")
    sv = np.linalg.svd(R, compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    D = gradient_difference_matrix(grid).toarray()
    L = D.T @ D
    scale = np.sum(R * R) / np.sum(D * D)
    rhs = np.concatenate([mu, np.zeros(D.shape[0])])
    path = []
    chosen = None
    for a in [alpha] if alpha is not None else alphas:
        # stacked least squares avoids squaring the condition number of R
        x = np.linalg.lstsq(np.vstack([R, math.sqrt(a * scale) * D]), rhs, rcond=None)[0]
        x = np.clip(x, *bounds)
        res = float(np.linalg.norm(R @ x - mu))
        entry = {"alpha": a, "residual": res, "seminorm": math.sqrt(max(float(x @ L @ x), 0.0))}
        path.append(entry)
        if chosen is None and res <= tau * noise:
            chosen = (entry, x)
            break
        chosen_last = (entry, x)
    if chosen is None:
        chosen = chosen_last
    entry, x = chosen
    if rank < grid.size:
        log.info("moment system has effective rank %d for %d unknowns", rank, grid.size)
    return EpsilonResult(ScalarField(grid, x), entry["alpha"], entry["residual"], rank, path)


def relative_l2(estimate, truth):
    """Relative error in the trapezoid ``L2`` norm."""
    w = truth.grid.node_weights
    d = np.asarray(estimate.values) - np.asarray(truth.values)
    return math.sqrt(float(w @ (d * d)) / float(w @ np.asarray(truth.values) ** 2))
