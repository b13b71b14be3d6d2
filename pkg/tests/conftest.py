import numpy as np
import pytest

from pmedn.grid import ScalarField, make_grid
from pmedn.laplace import HSchedule, PipelineConfig, dn_samples
from pmedn.families import fourier_boundary_family


def constant(grid, value=1.0):
    return ScalarField(grid, np.full(grid.size, float(value)))


@pytest.fixture(scope="session")
def square9():
    return make_grid(2, 1.0, 9)


@pytest.fixture(scope="session")
def unit_run(square9):
    """One full transform run on a coarse square: eps = gamma = 1, m = 2, a Fourier datum."""
    one = constant(square9)
    _, g = fourier_boundary_family(square9, 1)[0]
    schedule = HSchedule((4.0, 8.0, 16.0, 32.0, 64.0))
    results, u = dn_samples(one, one, 2.0, g, schedule, PipelineConfig(), return_solution=True)
    return {"eps": one, "gamma": one, "m": 2.0, "g": g, "results": results, "u": u,
            "schedule": schedule}


SMALL_RUN = {
    "grid.counts": "9 9",
    "data.count": "4",
    "model.gamma": "1 + 0.3*sin(pi*x1)*sin(pi*x2)",
    "model.eps": "1 + 0.5*x1",
    "run.stages": "recon-gamma, verify",
}


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A short end-to-end pipeline run (transform, fit, recon-gamma, verify)."""
    from pmedn.config import resolve
    from pmedn.pipeline import run

    out = tmp_path_factory.mktemp("small_run")
    cfg, parser = resolve(overrides=dict(SMALL_RUN, **{"run.output": str(out)}), environ={})
    report = run(cfg, parser)
    return out, report


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
