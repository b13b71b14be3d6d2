"""Experiment configuration: INI files with explicit defaults.

Every key has a default (see ``DEFAULTS``); the resolved configuration is
embedded in each report so a run can be repeated from its report alone.
Environment variables ``PMEDN_<SECTION>_<KEY>`` override file values, and
command-line flags override both.
"""

import configparser
import io
import os
from dataclasses import dataclass

import numpy as np

from .expr import Expression, ExpressionError
from .grid import CoefficientSpec, GridError, make_grid

ENV_PREFIX = "PMEDN_"

STAGES = ("forward", "transform", "fit", "recon-gamma", "recon-eps", "verify")

DEFAULTS = {
    "run": {
        "mode": "pme",
        "stages": "all",
        "output": "pmedn-out",
        "seed": "0",
        "jobs": "1",
    },
    "grid": {"dimension": "2", "extents": "1 1", "counts": "17 17"},
    "model": {
        "m": "2",
        "eps": "1",
        "eps_bounds": "0.1 10",
        "gamma": "1",
        "gamma_bounds": "0.1 10",
    },
    "data": {"family": "fourier", "count": "8", "amplitude": "0.5"},
    "transform": {"h": "4 8 16 32 64", "horizon_factor": "40", "tail": "true"},
    "time": {"dt0": "1e-3", "uniform_steps": "20", "ratio": "1.02", "richardson": "true"},
    "regularization": {"k0": "4e9", "k_max": "6.4e10", "k_tol": "1e-6"},
    "forward": {
        "boundary": "t*(1 + x1)",
        "source": "0",
        "exact": "",
        "horizon": "1",
        "steps": "",
        "k0": "1e6",
        "k_max": "1e9",
        "tol": "1e-4",
    },
    "inverse": {
        "gamma_alpha": "",
        "eps_alpha": "",
        "degree": "3",
        "s_step": "0.1",
        "noise": "0",
        "noise_seed_offset": "0",
    },
    "verify": {"slack": "1e-9", "datum": "1"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _floats(text, field):
    try:
        return [float(x) for x in str(text).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{field}: expected numbers, got {text!r}") from None


def _float(text, field):
    vals = _floats(text, field)
    if len(vals) != 1:
        raise ConfigError(f"{field}: expected one number, got {text!r}")
    return vals[0]


def _int(text, field):
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"{field}: expected an integer, got {text!r}") from None


def _bool(text, field):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{field}: expected a boolean, got {text!r}")


def load(path=None, text=None, overrides=None, environ=None):
    """Read a config file (or string) into a ``ConfigParser`` with all defaults filled."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh, source=str(path))
    if text is not None:
        cp.read_string(text)
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    environ = os.environ if environ is None else environ
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        for section in DEFAULTS:
            if rest.startswith(section + "_") and rest[len(section) + 1:] in DEFAULTS[section]:
                cp[section][rest[len(section) + 1:]] = value
                break
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {dotted}")
        cp[section][key] = str(value)
    return cp


def to_text(cp):
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def as_dict(cp):
    return {s: dict(cp[s]) for s in cp.sections()}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view of a resolved configuration."""

    raw: dict
    mode: str
    stages: tuple
    output: str
    seed: int
    jobs: int
    grid: object
    m: float
    eps: CoefficientSpec
    gamma: CoefficientSpec
    family: str
    count: int
    amplitude: float
    hs: tuple
    horizon_factor: float
    tail: bool
    dt0: float
    uniform_steps: int
    ratio: float
    richardson: bool
    k0: float
    k_max: float
    k_tol: float
    forward: dict
    inverse: dict
    verify: dict

    @classmethod
    def from_parser(cls, cp):
        raw = as_dict(cp)
        run = raw["run"]
        mode = run["mode"].strip()
        if mode not in ("pme", "heat-validation"):
            raise ConfigError(f"run.mode: expected 'pme' or 'heat-validation', got {mode!r}")
        stages = parse_stages(run["stages"])
        m = _float(raw["model"]["m"], "model.m")
        if mode == "heat-validation":
            if m != 1:
                raise ConfigError(f"model.m: heat-validation mode requires m = 1, got {m}")
            extra = [s for s in stages if s != "forward"]
            if extra:
                raise ConfigError(f"run.stages: heat-validation mode only runs 'forward', got {extra}")
        elif not m > 1:
            raise ConfigError(f"model.m: must exceed 1 (got {m}); use run.mode = heat-validation for m = 1")
        g = raw["grid"]
        dim = _int(g["dimension"], "grid.dimension")
        extents = _floats(g["extents"], "grid.extents")
        counts = [int(c) for c in _floats(g["counts"], "grid.counts")]
        try:
            grid = make_grid(dim, extents, counts)
        except GridError as exc:
            raise ConfigError(f"grid: {exc}") from None
        coeffs = {}
        for name in ("eps", "gamma"):
            lo, hi = _floats(raw["model"][f"{name}_bounds"], f"model.{name}_bounds")
            try:
                spec = CoefficientSpec.parse(raw["model"][name], lo, hi)
                if spec.expression is not None:
                    Expression(spec.expression)
            except (ValueError, ExpressionError) as exc:
                raise ConfigError(f"model.{name}: {exc}") from None
            coeffs[name] = spec
        data = raw["data"]
        family = data["family"].strip()
        if family not in ("fourier", "polynomial"):
            raise ConfigError(f"data.family: expected 'fourier' or 'polynomial', got {family!r}")
        hs = tuple(_floats(raw["transform"]["h"], "transform.h"))
        if any(h <= 0 for h in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
            raise ConfigError(f"transform.h: values must be positive and increasing, got {hs}")
        horizon_factor = _float(raw["transform"]["horizon_factor"], "transform.horizon_factor")
        if horizon_factor < 10:
            raise ConfigError("transform.horizon_factor: must be at least 10")
        t = raw["time"]
        reg = raw["regularization"]
        cfg = cls(
            raw=raw,
            mode=mode,
            stages=stages,
            output=run["output"],
            seed=_int(run["seed"], "run.seed"),
            jobs=max(1, _int(run["jobs"], "run.jobs")),
            grid=grid,
            m=m,
            eps=coeffs["eps"],
            gamma=coeffs["gamma"],
            family=family,
            count=_int(data["count"], "data.count"),
            amplitude=_float(data["amplitude"], "data.amplitude"),
            hs=hs,
            horizon_factor=horizon_factor,
            tail=_bool(raw["transform"]["tail"], "transform.tail"),
            dt0=_float(t["dt0"], "time.dt0"),
            uniform_steps=_int(t["uniform_steps"], "time.uniform_steps"),
            ratio=_float(t["ratio"], "time.ratio"),
            richardson=_bool(t["richardson"], "time.richardson"),
            k0=_float(reg["k0"], "regularization.k0"),
            k_max=_float(reg["k_max"], "regularization.k_max"),
            k_tol=_float(reg["k_tol"], "regularization.k_tol"),
            forward=_forward_section(raw["forward"]),
            inverse=_inverse_section(raw["inverse"]),
            verify={
                "slack": _float(raw["verify"]["slack"], "verify.slack"),
                "datum": _int(raw["verify"]["datum"], "verify.datum"),
            },
        )
        if cfg.count < 1:
            raise ConfigError("data.count: need at least one boundary datum")
        if not 0 < cfg.amplitude < 1:
            raise ConfigError("data.amplitude: must lie in (0, 1) to keep data positive")
        if cfg.ratio < 1:
            raise ConfigError("time.ratio: must be at least 1")
        if cfg.dt0 <= 0:
            raise ConfigError("time.dt0: must be positive")
        if not 0 < cfg.k0 <= cfg.k_max:
            raise ConfigError("regularization.k0: need 0 < k0 <= k_max")
        return cfg


def _forward_section(sec):
    out = {}
    for key in ("boundary", "source", "exact"):
        text = sec[key].strip()
        if text:
            try:
                Expression(text, variables=("x1", "x2", "x3", "t"))
            except ExpressionError as exc:
                raise ConfigError(f"forward.{key}: {exc}") from None
        out[key] = text
    out["horizon"] = _float(sec["horizon"], "forward.horizon")
    if out["horizon"] <= 0:
        raise ConfigError("forward.horizon: must be positive")
    out["steps"] = _int(sec["steps"], "forward.steps") if sec["steps"].strip() else None
    out["k0"] = _float(sec["k0"], "forward.k0")
    out["k_max"] = _float(sec["k_max"], "forward.k_max")
    out["tol"] = _float(sec["tol"], "forward.tol")
    return out


def _inverse_section(sec):
    out = {}
    for key in ("gamma_alpha", "eps_alpha"):
        out[key] = _float(sec[key], f"inverse.{key}") if sec[key].strip() else None
    out["degree"] = _int(sec["degree"], "inverse.degree")
    out["s_step"] = _float(sec["s_step"], "inverse.s_step")
    if not 0 < out["s_step"] < 1:
        raise ConfigError("inverse.s_step: must lie in (0, 1)")
    out["noise"] = _float(sec["noise"], "inverse.noise")
    if out["noise"] < 0:
        raise ConfigError("inverse.noise: must be nonnegative")
    out["noise_seed_offset"] = _int(sec["noise_seed_offset"], "inverse.noise_seed_offset")
    return out


def parse_stages(text):
    items = [s.strip() for s in str(text).replace(",", " ").split() if s.strip()]
    if items == ["all"]:
        return STAGES[:-1] + ("verify",)
    for s in items:
        if s not in STAGES:
            raise ConfigError(f"run.stages: unknown stage {s!r} (choose from {', '.join(STAGES)}, all)")
    return tuple(s for s in STAGES if s in items)


def resolve(path=None, text=None, overrides=None, environ=None):
    """Load, override and validate; returns ``(ExperimentConfig, ConfigParser)``."""
    try:
        cp = load(path, text, overrides, environ)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig.from_parser(cp), cp


def grid_coefficient(spec, grid):
    from .grid import eval_coefficient

    return eval_coefficient(spec, grid)


def seed_sequence(seed, *keys):
    """Deterministic generator for a (seed, stage, item) combination."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])
