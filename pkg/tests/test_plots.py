import csv
import json

import numpy as np
import pytest

from pmedn.plots import PlotDataError, emit_plots, load_report, parse_selection


def _rows(path, delimiter):
    with open(path, newline="") as fh:
        return list(csv.reader(fh, delimiter=delimiter))


def test_parse_selection():
    assert parse_selection("") == []
    assert parse_selection("fit, remainder") == ["fit", "remainder"]
    assert parse_selection("all") == ["remainder", "reconstruction", "fit"]
    with pytest.raises(PlotDataError, match="histogram"):
        parse_selection("histogram")


def test_remainder_tsv_matches_report(small_run, tmp_path):
    run_dir, report = small_run
    manifest = emit_plots(run_dir, "remainder", tmp_path, png=False)
    assert manifest == {"remainder": ["remainder_R1.tsv", "remainder_R2.tsv"]}
    rows = _rows(tmp_path / "remainder_R1.tsv", "\t")
    assert rows[0] == ["log_h", "log_R"]
    data = np.array(rows[1:], dtype=float)
    rem = report["results"]["verify"]["remainders"]
    np.testing.assert_allclose(data[:, 0], np.log(rem["h"]), rtol=1e-15)
    np.testing.assert_allclose(data[:, 1], np.log(rem["R1"]), rtol=1e-15)


def test_reconstruction_and_fit_outputs(small_run, tmp_path):
    run_dir, _ = small_run
    manifest = emit_plots(run_dir, "reconstruction,fit", tmp_path)
    assert manifest["reconstruction"] == ["reconstruction_gamma.csv", "reconstruction_gamma.png"]
    assert manifest["fit"] == ["dn_fit_residuals.tsv", "dn_fit_residuals.png"]
    rows = _rows(tmp_path / "reconstruction_gamma.csv", ",")
    assert rows[0] == ["x1", "x2", "truth", "estimate"] and len(rows) == 1 + 81
    assert rows[0] == _rows(run_dir / "recon-gamma" / "gamma.csv", ",")[0]
    fit = _rows(tmp_path / "dn_fit_residuals.tsv", "\t")
    assert fit[0] == ["label", "h", "residual"] and len(fit) == 1 + 4 * 5
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    for files in manifest.values():
        for f in files:
            assert (tmp_path / f).stat().st_size > 0


def test_empty_selection_writes_nothing(small_run, tmp_path):
    run_dir, _ = small_run
    assert emit_plots(run_dir, "", tmp_path / "p") == {}
    assert not (tmp_path / "p").exists()


def test_missing_artifacts(tmp_path):
    report = {"results": {}, "config": {"model": {"m": "2"}}}
    for sel in ("remainder", "reconstruction", "fit"):
        with pytest.raises(PlotDataError):
            emit_plots(report, sel, tmp_path, run_dir=tmp_path)
    with pytest.raises(PlotDataError, match="not found"):
        load_report(tmp_path)
