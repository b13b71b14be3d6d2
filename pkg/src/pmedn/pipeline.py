"""Stage runner behind ``pmedn run`` and ``pmedn verify``.

Stages run in the fixed order ``forward, transform, fit, recon-gamma,
recon-eps, verify``; requesting a stage also runs the stages it needs
(``fit`` needs ``transform``, ``recon-gamma`` needs ``fit``, ``recon-eps``
needs ``recon-gamma``).  Every stage writes its artifacts under the output
directory as it finishes, so a failure leaves the earlier artifacts in
place.  ``report.json`` holds only deterministic content (the resolved
configuration, the check table, error norms, summaries and a manifest with
content hashes); wall-clock timings go to ``timings.json``.
"""

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import STAGES, to_text
from .elliptic import DiscreteOperator, dn_matrix
from .expansion import (
    CheckResult,
    build_oracle,
    fit_expansion,
    gamma_one_plus,
    loglog_slope,
    nonneg_power,
    remainders,
)
from .expr import Expression, evaluate
from .families import fourier_boundary_family, harmonic_polynomials, positive_shift
from .fieldio import write_field
from .forward import PMEProblem, energy_norm, solve_pme, step_fluxes
from .grid import BoundaryField, ScalarField, TimeField, boundary_pair, eval_coefficient
from .inverse import (
    GammaInverseProblem,
    MomentSystem,
    central_difference_bias,
    moment_from_b,
    moment_uncertainty,
    recover_epsilon,
    recover_gamma,
    relative_l2,
    sample_uncertainty,
)
from .laplace import DNSampleSet, HSchedule, PipelineConfig, dn_samples

log = logging.getLogger(__name__)

REPORT_FORMAT = "pmedn-report/1"
REQUIRES = {"fit": "transform", "recon-gamma": "fit", "recon-eps": "recon-gamma"}
# Stream identifiers for the noise generator, one per measuring stage.
NOISE_STREAMS = {"transform": 1, "recon-eps": 2}
DENSITY_NOTE = (
    "eps moments rely on products of gamma-harmonic functions being dense; "
    "runs in d = 2 assume this without proof"
)


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.original = exc


def expand_stages(stages):
    """Requested stages plus their prerequisites, in execution order."""
    wanted = set(stages)
    changed = True
    while changed:
        changed = False
        for s in list(wanted):
            need = REQUIRES.get(s)
            if need and need not in wanted:
                wanted.add(need)
                changed = True
    return tuple(s for s in STAGES if s in wanted)


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dump_json(path, doc):
    Path(path).write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _transform_job(args):
    eps, gamma, m, label, g, schedule, pconfig = args
    results = dn_samples(eps, gamma, m, g, schedule, pconfig)
    return DNSampleSet.from_results(label, g, results), _transform_summary(results, g)


def _transform_summary(results, g):
    return {
        "boundary_defect": max(r.meta["boundary_defect"] for r in results),
        "consistency": max(r.consistency for r in results),
        "min_N": min(float(np.min(r.N.values)) for r in results),
        "min_V": min(float(np.min(r.V.values)) for r in results),
        "monotonicity_defect": results[0].meta["monotonicity_defect"],
        "k_sequence": results[0].meta["k_sequence"],
        "steps": results[0].meta["steps"],
        "horizon": results[0].meta["horizon"],
        "tolerances": [r.tolerance for r in results],
    }


def _measure(samples, noise, rng):
    """Multiply every sample by ``1 + noise * xi`` with standard normal ``xi``."""
    if noise == 0:
        return samples
    lams = [
        BoundaryField(lam.grid, lam.values * (1.0 + noise * rng.standard_normal(lam.values.size)))
        for lam in samples.lams
    ]
    return DNSampleSet(samples.label, samples.g, samples.hs, lams, list(samples.tolerances))


def data_family(cfg):
    """``(label, BoundaryField)`` pairs of positive Dirichlet data."""
    grid = cfg.grid
    if cfg.family == "fourier":
        if grid.dimension != 2:
            raise ValueError("data.family = fourier needs a 2D grid; use polynomial")
        return fourier_boundary_family(grid, cfg.count, cfg.amplitude)
    xb = grid.coords[grid.boundary]
    out = []
    for degree in range(1, 8):
        polys = harmonic_polynomials(degree, grid.dimension)
        if len(polys) - 1 >= cfg.count or degree == 7:
            break
    for i, p in enumerate(polys[1:cfg.count + 1]):
        vals = evaluate(p, xb)
        vals = 1.0 + cfg.amplitude * vals / np.max(np.abs(vals))
        out.append((f"p{i + 1}", BoundaryField(grid, vals)))
    return out


class Pipeline:
    """One configured experiment.  Call :meth:`run` once."""

    def __init__(self, cfg, parser, output=None, jobs=None):
        self.cfg = cfg
        self.parser = parser
        self.out = Path(output or cfg.output)
        self.jobs = int(jobs or cfg.jobs)
        self.checks = {}
        self.errors = {}
        self.results = {}
        self.timings = {}
        self.stages_run = []
        self.state = {}
        self._truth = None

    # ------------------------------------------------------------------ helpers

    @property
    def truth(self):
        if self._truth is None:
            grid = self.cfg.grid
            self._truth = (eval_coefficient(self.cfg.eps, grid), eval_coefficient(self.cfg.gamma, grid))
        return self._truth

    @property
    def schedule(self):
        return HSchedule(self.cfg.hs, self.cfg.horizon_factor, self.cfg.tail)

    @property
    def pconfig(self):
        c = self.cfg
        return PipelineConfig(c.k0, c.k_max, c.k_tol, c.dt0, c.uniform_steps, c.ratio, c.richardson)

    def _dir(self, stage):
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _check(self, stage, name, value, limit, strict=True):
        key = f"{stage}: {name}"
        if key in self.checks:
            raise RuntimeError(f"check {key!r} declared twice")
        c = CheckResult(key, float(value), float(limit), strict)
        self.checks[key] = dict(c.as_dict(), stage=stage)

    def _map(self, fn, items):
        if self.jobs > 1 and len(items) > 1:
            with ProcessPoolExecutor(max_workers=min(self.jobs, len(items))) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]

    def _rng(self, stage, index):
        seed = self.cfg.seed + self.cfg.inverse["noise_seed_offset"]
        return np.random.default_rng([seed, NOISE_STREAMS[stage], index])

    def _sample(self, items):
        eps, gamma = self.truth
        jobs = [(eps, gamma, self.cfg.m, label, g, self.schedule, self.pconfig) for label, g in items]
        return self._map(_transform_job, jobs)

    # ------------------------------------------------------------------ driver

    def run(self):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(to_text(self.parser))
        status, failure = "ok", None
        try:
            for stage in expand_stages(self.cfg.stages):
                t0 = time.perf_counter()
                log.info("stage %s", stage)
                try:
                    getattr(self, "stage_" + stage.replace("-", "_"))()
                except Exception as exc:
                    raise StageError(stage, exc) from exc
                finally:
                    self.timings[stage] = time.perf_counter() - t0
                self.stages_run.append(stage)
        except StageError as exc:
            status, failure = "failed", exc
            raise
        finally:
            self.report = self._write_report(status, failure)
        return self.report

    def _write_report(self, status, failure):
        manifest = {}
        for path in sorted(self.out.rglob("*")):
            if path.is_file() and path.name not in ("report.json", "timings.json"):
                manifest[path.relative_to(self.out).as_posix()] = _sha256(path)
        report = {
            "format": REPORT_FORMAT,
            "version": __version__,
            "status": status,
            "failed_stage": failure.stage if failure else None,
            "error": str(failure.original) if failure else None,
            "requested_stages": list(self.cfg.stages),
            "stages": self.stages_run,
            "config": self.cfg.raw,
            "checks": self.checks,
            "all_strict_checks_pass": all(c["pass"] for c in self.checks.values() if c["strict"]),
            "errors": self.errors,
            "results": self.results,
            "manifest": manifest,
            "notes": [DENSITY_NOTE] if self.cfg.grid.dimension == 2 and "recon-eps" in self.stages_run else [],
        }
        dump_json(self.out / "report.json", report)
        dump_json(self.out / "timings.json", {"seconds": self.timings})
        return _clean(report)

    # ------------------------------------------------------------------ stages

    def stage_forward(self):
        cfg, fw = self.cfg, self.cfg.forward
        grid = cfg.grid
        eps, gamma = self.truth
        variables = ("x1", "x2", "x3", "t")
        xb = grid.coords[grid.boundary]
        bexpr = Expression(fw["boundary"], variables)
        env_b = {f"x{a + 1}": xb[:, a] for a in range(grid.dimension)}
        env = {f"x{a + 1}": grid.coords[:, a] for a in range(grid.dimension)}

        def boundary(t):
            return bexpr(shape=(xb.shape[0],), t=t, **env_b)

        source = None
        if fw["source"] and fw["source"] != "0":
            sexpr = Expression(fw["source"], variables)
            source = lambda t: sexpr(shape=(grid.size,), t=t, **env)  # noqa: E731
        problem = PMEProblem(eps, gamma, cfg.m, boundary, fw["horizon"], fw["steps"], source)
        u = solve_pme(problem, fw["tol"], k0=fw["k0"], k_max=fw["k_max"])
        k = u.meta["k"]
        _, conservation = step_fluxes(problem, u, k)
        slack = cfg.verify["slack"]
        self._check("forward", "maximum principle", u.meta["max_principle_defect"], slack)
        self._check("forward", "nonnegativity", max(0.0, -float(np.min(u.values))), slack)
        self._check("forward", "k-monotonicity", u.meta["monotonicity_defect"], slack)
        self._check("forward", "conservation", float(np.max(conservation, initial=0.0)), 1e-8)
        summary = {
            "k_sequence": u.meta["k_sequence"],
            "k_differences": u.meta["differences"],
            "steps": len(u) - 1,
            "newton_iterations": u.meta["total_newton_iterations"],
            "halvings": u.meta["halvings"],
            "energy_norm": energy_norm(u, cfg.m),
        }
        d = self._dir("forward")
        final = {"u": u.values[-1]}
        if fw["exact"]:
            eexpr = Expression(fw["exact"], variables)
            exact = np.stack([eexpr(shape=(grid.size,), t=t, **env) for t in u.times])
            err = float(np.max(np.abs(u.values - exact)))
            self.errors["forward_linf"] = err
            summary["linf_error"] = err
            final["exact"] = exact[-1]
        stride = max(1, math.ceil((len(u) - 1) / 100))
        keep = np.unique(np.r_[np.arange(0, len(u), stride), len(u) - 1])
        write_field(d / "solution.field", TimeField(grid, u.times[keep], u.values[keep]))
        _write_columns(d / "final.csv", grid.coords, final, [f"x{a + 1}" for a in range(grid.dimension)])
        self.results["forward"] = summary

    def stage_transform(self):
        cfg = self.cfg
        items = data_family(cfg)
        out = self._sample(items)
        d = self._dir("transform")
        clean, measured, summaries = [], [], {}
        for i, (samples, summary) in enumerate(out):
            noisy = _measure(samples, cfg.inverse["noise"], self._rng("transform", i))
            noisy.write(d)
            noisy.write_csv(d / f"{samples.label}.csv")
            clean.append(samples)
            measured.append(noisy)
            summaries[samples.label] = summary
        worst = lambda key: max(s[key] for s in summaries.values())  # noqa: E731
        self._check("transform", "V = h^2 g on the boundary (relative)", worst("boundary_defect"), 5e-3)
        self._check("transform", "K V + w N = 0 (relative)", worst("consistency"), 1e-8)
        self._check("transform", "N >= 0", max(0.0, -min(s["min_N"] for s in summaries.values())), cfg.verify["slack"])
        self._check("transform", "V >= 0", max(0.0, -min(s["min_V"] for s in summaries.values())), cfg.verify["slack"])
        self._check("transform", "k-monotonicity", worst("monotonicity_defect"), cfg.verify["slack"])
        self.state["samples"] = measured
        self.results["transform"] = {"h": list(cfg.hs), "noise": cfg.inverse["noise"], "data": summaries}

    def stage_fit(self):
        cfg = self.cfg
        eps, gamma = self.truth
        op = DiscreteOperator(gamma)
        d = self._dir("fit")
        fits, rows = [], []
        grid = cfg.grid
        S = grid.surface_weights
        for samples in self.state["samples"]:
            fit = fit_expansion(samples, cfg.m)
            fit.write_json(d / f"{samples.label}.json")
            fit.write_residual_csv(d / f"{samples.label}_residuals.csv")
            oracle = build_oracle(eps, gamma, cfg.m, samples.g, op)
            errA = _rel_boundary(fit.A, oracle.A, S)
            errB = _rel_boundary(fit.B, oracle.B, S)
            rows.append({"label": samples.label, "A_error": errA, "B_error": errB, **fit.summary()})
            fits.append(fit)
        self.state["fits"] = fits
        self.errors["fit_A_max_relative"] = max(r["A_error"] for r in rows)
        self.errors["fit_B_max_relative"] = max(r["B_error"] for r in rows)
        self._check("fit", "A matches the Calderon trace (relative boundary L2)", self.errors["fit_A_max_relative"], 0.02)
        with open(d / "summary.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            cols = ["label", "A_error", "B_error", "remainder_slope", "kappa", "condition"]
            out.writerow(cols)
            for r in rows:
                out.writerow([r["label"]] + [format(float(r[c]), ".17g") for c in cols[1:]])
        self.results["fit"] = {r["label"]: r for r in rows}

    def stage_recon_gamma(self):
        cfg = self.cfg
        eps, gamma = self.truth
        samples, fits = self.state["samples"], self.state["fits"]
        S = cfg.grid.surface_weights
        level = 0.0
        for s in samples:
            dA, _, sA, _ = sample_uncertainty(s, cfg.m, cfg.inverse["noise"])
            level += float(np.sum(S * (dA**2 + sA**2)))
        problem = GammaInverseProblem(
            [s.g for s in samples], [f.A for f in fits], bounds=(gamma.bounds or (0.1, 10.0)),
            alpha=cfg.inverse["gamma_alpha"], noise=math.sqrt(level),
        )
        res = recover_gamma(problem)
        err = relative_l2(res.gamma, gamma)
        self.errors["gamma_relative_l2"] = err
        self.state["gamma_hat"] = res.gamma
        d = self._dir("recon-gamma")
        write_field(d / "gamma.field", res.gamma)
        _write_columns(d / "gamma.csv", cfg.grid.coords, {"truth": gamma.values, "estimate": res.gamma.values},
                       [f"x{a + 1}" for a in range(cfg.grid.dimension)])
        self.results["recon-gamma"] = dict(res.summary(), relative_l2=err, noise_level=math.sqrt(level),
                                           data_count=len(samples))

    def stage_recon_eps(self):
        cfg = self.cfg
        grid = cfg.grid
        eps, gamma = self.truth
        m = cfg.m
        gamma_hat = self.state["gamma_hat"]
        op_hat = DiscreteOperator(gamma_hat)
        polys = harmonic_polynomials(cfg.inverse["degree"], grid.dimension)
        xb = grid.coords[grid.boundary]
        lifts = [op_hat.solve(evaluate(p, xb)) for p in polys]
        W = [ScalarField(grid, v) for v in lifts]
        H = [W[0]] + [ScalarField(grid, positive_shift(v, 0.5)) for v in lifts[1:]]
        steps = [cfg.inverse["s_step"] / float(np.max(np.abs(h.values))) for h in H]
        items = []
        for i, (h, s) in enumerate(zip(H, steps)):
            hb = h.values[grid.boundary]
            items.append((f"H{i}_plus", BoundaryField(grid, 1 + s * hb)))
            items.append((f"H{i}_minus", BoundaryField(grid, 1 - s * hb)))
        runs = self._sample(items)
        noise = cfg.inverse["noise"]
        measured = [_measure(smp, noise, self._rng("recon-eps", j)) for j, (smp, _) in enumerate(runs)]
        mu, unc, bias = [], [], []
        for i, s in enumerate(steps):
            plus, minus = measured[2 * i], measured[2 * i + 1]
            fp, fm = fit_expansion(plus, m), fit_expansion(minus, m)
            mu.append(moment_from_b(fp.B, fm.B, W, s, m))
            unc.append(moment_uncertainty(plus, minus, W, s, m, noise))
            bias.append(central_difference_bias(H[i], m, s))
        mu, unc, bias = np.array(mu), np.array(unc), np.array(bias)
        system = MomentSystem(H, W, mu, steps, gamma_one_plus(m), [f"H{i}" for i in range(len(H))], polys, bias)
        level = math.sqrt(float(np.sum(unc**2) + np.sum((bias[:, None] * mu) ** 2)))
        lo, hi = eps.bounds or (1e-3, 1e3)
        res = recover_epsilon(system, grid, alpha=cfg.inverse["eps_alpha"], bounds=(lo, hi), noise=level)
        exact = np.array([[float(grid.node_weights @ (eps.values * h.values * w.values)) for w in W] for h in H])
        err = relative_l2(res.eps, eps)
        self.errors["eps_relative_l2"] = err
        self.errors["moment_max_relative"] = float(np.max(np.abs(mu - exact)) / np.max(np.abs(exact)))
        d = self._dir("recon-eps")
        system.to_json(d / "moments.json")
        write_field(d / "eps.field", res.eps)
        _write_columns(d / "eps.csv", grid.coords, {"truth": eps.values, "estimate": res.eps.values},
                       [f"x{a + 1}" for a in range(grid.dimension)])
        self.results["recon-eps"] = dict(
            res.summary(), relative_l2=err, noise_level=level, moments=mu, exact_moments=exact,
            moment_uncertainty=unc, bias=bias, s_step=steps,
        )

    def stage_verify(self):
        cfg = self.cfg
        m, slack = cfg.m, cfg.verify["slack"]
        eps, gamma = self.truth
        grid = cfg.grid
        family = data_family(cfg)
        index = cfg.verify["datum"] - 1
        if not 0 <= index < len(family):
            raise ValueError(f"verify.datum must lie in 1..{len(family)}")
        label, g = family[index]
        op = DiscreteOperator(gamma)
        results, u = dn_samples(eps, gamma, m, g, self.schedule, self.pconfig, op, return_solution=True)
        oracle = build_oracle(eps, gamma, m, g, op)
        add = lambda name, value, limit, strict=True: self._check("verify", name, value, limit, strict)  # noqa: E731
        # forward scheme
        add("maximum principle", u.meta["max_principle_defect"], slack)
        add("nonnegativity", max(0.0, -float(np.min(u.values))), slack)
        add("k-monotonicity", u.meta["monotonicity_defect"], slack)
        # transform identities
        add("V = h^2 g on the boundary (relative)", max(r.meta["boundary_defect"] for r in results), 5e-3)
        add("K V + w N = 0 (relative)", max(r.consistency for r in results), 1e-8)
        add("N >= 0", max(0.0, -min(float(np.min(r.N.values)) for r in results)), slack)
        # sign structure of the expansion
        from .expansion import verify_expansion

        sigma, checks = verify_expansion(oracle, u, results, slack)
        for c in checks:
            add(c.name, c.value, c.limit, c.strict)
        # remainder orders
        hs = [r.h for r in results]
        R1n, R2n = [], []
        for r in results:
            R1, R2 = remainders(r.V, oracle, r.h)
            R1n.append(float(np.max(np.abs(R1.values))))
            R2n.append(float(np.max(np.abs(R2.values))))
        s1, s2 = loglog_slope(hs, R1n), loglog_slope(hs, R2n)
        add("slope of |R1| within 1/m +- 0.15", abs(s1 - 1.0 / m), 0.15)
        add("slope of |R2| below slope of |R1| by 0.3", s2 - (s1 - 0.3), 0.0)
        # leading and second DN terms
        samples = DNSampleSet.from_results(label, g, results)
        fit = fit_expansion(samples, m)
        S = grid.surface_weights
        errA = _rel_boundary(fit.A, oracle.A, S)
        add("fitted A matches the Calderon trace (relative boundary L2)", errA, 0.02)
        polys = harmonic_polynomials(3, grid.dimension)
        xb = grid.coords[grid.boundary]
        Wb = [BoundaryField(grid, evaluate(p, xb)) for p in polys]
        Wf = [op.solve(w.values) for w in Wb]
        lhs = np.array([boundary_pair(fit.B, w) for w in Wb])
        rhs = np.array([
            gamma_one_plus(m) * float(grid.node_weights @ (eps.values * nonneg_power(oracle.V0.values, 1 / m) * w))
            for w in Wf
        ])
        moment_err = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
        add("<B, W> = G int eps V0^(1/m) W (relative)", moment_err, 0.03)
        D = dn_matrix(gamma, Wb[:5], op)
        add("DN matrix symmetry (relative)", float(np.max(np.abs(D - D.T)) / np.max(np.abs(D))), 1e-8)
        d = self._dir("verify")
        with open(d / "remainders.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["h", "R1_max", "R2_max"])
            for row in zip(hs, R1n, R2n):
                out.writerow([format(x, ".17g") for x in row])
        with open(d / "checks.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["check", "value", "limit", "pass", "strict"])
            for name, c in self.checks.items():
                if c["stage"] == "verify":
                    out.writerow([name, format(c["value"], ".17g"), format(c["limit"], ".17g"), c["pass"], c["strict"]])
        self.results["verify"] = {
            "datum": label,
            "sigma": sigma,
            "remainders": {"h": hs, "R1": R1n, "R2": R2n, "slope_R1": s1, "slope_R2": s2},
            "fit": fit.summary(),
            "A_error": errA,
            "moment_error": moment_err,
            "moments": {"pairing": lhs, "integral": rhs, "W": polys},
        }


def _rel_boundary(a, b, S):
    a, b = np.asarray(a.values), np.asarray(b.values)
    den = math.sqrt(float(np.sum(S * b * b)))
    num = math.sqrt(float(np.sum(S * (a - b) ** 2)))
    return num / den if den > 0 else num


def _write_columns(path, coords, columns, coord_names):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([*coord_names, *columns])
        cols = [np.asarray(v) for v in columns.values()]
        for i, x in enumerate(coords):
            out.writerow([format(float(c), ".17g") for c in x] + [format(float(v[i]), ".17g") for v in cols])


def run(cfg, parser, output=None, jobs=None):
    """Run the configured stages and return the report dictionary."""
    return Pipeline(cfg, parser, output, jobs).run()
