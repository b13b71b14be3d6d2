import json

import pytest

from pmedn.cli import EXIT_INVALID, EXIT_INVARIANT, EXIT_NUMERICAL, EXIT_OK, main

WAVE = [
    "--set", "grid.dimension=1", "--set", "grid.extents=2", "--set", "grid.counts=41",
    "--set", "forward.boundary=0.25*(sqrt((t - x1)^2) + t - x1)",
    "--set", "forward.horizon=1",
]
TINY_VERIFY = ["--set", "grid.counts=5 5", "--set", "data.count=1"]


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in list(__import__("os").environ):
        if name.startswith("PMEDN_"):
            monkeypatch.delenv(name)


def test_run_forward_ok(tmp_path, capsys):
    code = main(["run", "--stage", "forward", "--output", str(tmp_path), *WAVE])
    assert code == EXIT_OK
    assert "report:" in capsys.readouterr().out
    assert json.loads((tmp_path / "report.json").read_text())["status"] == "ok"


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--stage", "forward", "--set", "model.m=0.5"],
        ["run", "--stage", "invert"],
        ["run", "--set", "model.nothing=1"],
        ["run", "--set", "no-equals-sign"],
        ["run", "--config", "/nonexistent/config.ini"],
        ["plot-data", "--report", "/nonexistent/run", "--select", "fit"],
    ],
)
def test_validation_errors_exit_2(tmp_path, argv, capsys):
    assert main([*argv, *([] if argv[0] == "plot-data" else ["--output", str(tmp_path)])]) == EXIT_INVALID
    assert "pmedn:" in capsys.readouterr().err


def test_env_validation_error(tmp_path, monkeypatch):
    monkeypatch.setenv("PMEDN_MODEL_M", "abc")
    assert main(["run", "--stage", "forward", "--output", str(tmp_path)]) == EXIT_INVALID


def test_numerical_failure_exits_3(tmp_path, capsys):
    argv = ["run", "--stage", "forward", "--output", str(tmp_path), *WAVE,
            "--set", "forward.k_max=1e6", "--set", "forward.tol=1e-12"]
    assert main(argv) == EXIT_NUMERICAL
    assert "stage 'forward' failed" in capsys.readouterr().err
    assert json.loads((tmp_path / "report.json").read_text())["status"] == "failed"


def test_verify_strict_exit_codes(tmp_path):
    assert main(["verify", "--strict", "--output", str(tmp_path / "a"), *TINY_VERIFY]) == EXIT_OK
    # a negative slack makes zero-valued defects fail their strict checks
    bad = ["verify", "--output", str(tmp_path / "b"), *TINY_VERIFY, "--set", "verify.slack=-1"]
    assert main(bad) == EXIT_OK
    assert main([*bad[:1], "--strict", *bad[1:]]) == EXIT_INVARIANT


def test_plot_data(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert main(["verify", "--output", str(run_dir), *TINY_VERIFY]) == EXIT_OK
    capsys.readouterr()
    assert main(["plot-data", "--report", str(run_dir), "--select", "remainder"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "remainder: remainder_R1.tsv" in out and "remainder.png" in out
    assert (run_dir / "plots" / "remainder.png").stat().st_size > 0
    assert main(["plot-data", "--report", str(run_dir), "--select", ""]) == EXIT_OK
    assert main(["plot-data", "--report", str(run_dir), "--select", "reconstruction"]) == EXIT_INVALID
    assert main(["plot-data", "--report", str(run_dir), "--select", "bogus"]) == EXIT_INVALID
