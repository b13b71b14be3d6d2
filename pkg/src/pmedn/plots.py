"""Plot data (CSV/TSV) and PNG figures from a finished run.

Selections:

``remainder``
    ``remainder_R1.tsv`` and ``remainder_R2.tsv`` with columns ``log_h`` and
    ``log_R`` (natural logarithms of ``h`` and of the max-norm remainder),
    plus ``remainder.png``.
``reconstruction``
    ``reconstruction_gamma.csv`` / ``reconstruction_eps.csv`` with the node
    coordinates, truth and estimate, plus a mid-line cross-section figure.
``fit``
    ``dn_fit_residuals.tsv`` (label, h, max residual of the two-term DN fit)
    plus ``dn_fit_residuals.png``.
"""

import csv
import json
from pathlib import Path

import numpy as np

SELECTIONS = ("remainder", "reconstruction", "fit")


class PlotDataError(ValueError):
    """A selection needs an artifact the run did not produce."""


def _style():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.figsize": (5.0, 3.6), "axes.grid": True, "grid.alpha": 0.3,
                         "font.size": 9, "savefig.dpi": 150})
    return plt


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def parse_selection(text):
    items = [s.strip() for s in str(text or "").replace(",", " ").split() if s.strip()]
    if items == ["all"]:
        return list(SELECTIONS)
    for s in items:
        if s not in SELECTIONS:
            raise PlotDataError(f"unknown selection {s!r} (choose from {', '.join(SELECTIONS)}, all)")
    return items


def _write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, delimiter="\t")
        out.writerow(header)
        for row in rows:
            out.writerow([r if isinstance(r, str) else format(float(r), ".17g") for r in row])


def _remainder(report, run_dir, out, png):
    rem = report.get("results", {}).get("verify", {}).get("remainders")
    if not rem:
        raise PlotDataError("remainder plot needs results.verify.remainders in the report (run stage 'verify')")
    hs = np.asarray(rem["h"], dtype=float)
    files = []
    for key in ("R1", "R2"):
        vals = np.asarray(rem[key], dtype=float)
        path = out / f"remainder_{key}.tsv"
        _write_tsv(path, ["log_h", "log_R"], zip(np.log(hs), np.log(vals)))
        files.append(path)
    if png:
        plt = _style()
        fig, ax = plt.subplots()
        m = float(report["config"]["model"]["m"])
        for key, marker in (("R1", "o"), ("R2", "s")):
            ax.loglog(hs, rem[key], marker=marker, label=f"max |{key}|  (slope {rem['slope_' + key]:.2f})")
        ref = np.asarray(rem["R1"])[0] * (hs / hs[0]) ** (1.0 / m)
        ax.loglog(hs, ref, "k--", lw=0.8, label=f"h^(1/m), m = {m:g}")
        ax.set_xlabel("h")
        ax.set_ylabel("remainder (max norm)")
        ax.legend()
        path = out / "remainder.png"
        _save(fig, path)
        files.append(path)
    return files


def _read_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    return header, data


def _reconstruction(report, run_dir, out, png):
    files = []
    found = 0
    for name, rel in (("gamma", "recon-gamma/gamma.csv"), ("eps", "recon-eps/eps.csv")):
        src = run_dir / rel
        if not src.exists():
            continue
        found += 1
        header, data = _read_columns(src)
        path = out / f"reconstruction_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow([format(v, ".17g") for v in row])
        files.append(path)
        if png:
            files.append(_cross_section(name, header, data, out))
    if not found:
        raise PlotDataError(
            f"reconstruction plot needs recon-gamma/gamma.csv or recon-eps/eps.csv under {run_dir}"
        )
    return files


def _cross_section(name, header, data, out):
    plt = _style()
    ncoord = sum(1 for h in header if h.startswith("x"))
    x = data[:, :ncoord]
    truth, est = data[:, ncoord], data[:, ncoord + 1]
    if ncoord >= 2:
        # nodes on the grid line closest to the middle of the second axis
        levels = np.unique(x[:, 1])
        mid = levels[np.argmin(np.abs(levels - 0.5 * (levels[0] + levels[-1])))]
        keep = np.isclose(x[:, 1], mid)
        label = f"x2 = {mid:.3g}"
    else:
        keep = np.ones(len(x), dtype=bool)
        label = "full line"
    order = np.argsort(x[keep, 0])
    fig, ax = plt.subplots()
    ax.plot(x[keep, 0][order], truth[keep][order], "k-", label="truth")
    ax.plot(x[keep, 0][order], est[keep][order], "o--", ms=3, label="estimate")
    ax.set_xlabel("x1")
    ax.set_ylabel(name)
    ax.set_title(f"{name} cross-section, {label}")
    ax.legend()
    path = out / f"reconstruction_{name}.png"
    _save(fig, path)
    return path


def _fit(report, run_dir, out, png):
    sources = sorted((run_dir / "fit").glob("*_residuals.csv")) if (run_dir / "fit").exists() else []
    if not sources:
        raise PlotDataError(f"fit plot needs fit/*_residuals.csv under {run_dir} (run stage 'fit')")
    rows, series = [], {}
    for src in sources:
        label = src.name[: -len("_residuals.csv")]
        _, data = _read_columns(src)
        series[label] = data
        rows.extend((label, h, r) for h, r in data)
    path = out / "dn_fit_residuals.tsv"
    _write_tsv(path, ["label", "h", "residual"], rows)
    files = [path]
    if png:
        plt = _style()
        fig, ax = plt.subplots()
        for label, data in series.items():
            ax.loglog(data[:, 0], np.maximum(data[:, 1], np.finfo(float).tiny), marker=".", label=label)
        ax.set_xlabel("h")
        ax.set_ylabel("max |two-term fit residual|")
        if len(series) <= 10:
            ax.legend(fontsize=7)
        path = out / "dn_fit_residuals.png"
        _save(fig, path)
        files.append(path)
    return files


_HANDLERS = {"remainder": _remainder, "reconstruction": _reconstruction, "fit": _fit}


def load_report(path):
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise PlotDataError(f"report not found: {path}")
    return json.loads(path.read_text()), path.parent


def emit_plots(report, selection, output=None, run_dir=None, png=True):
    """Write plot data (and figures) for ``selection``; returns the manifest.

    ``report`` is a report dictionary or a path to ``report.json`` (or its
    directory).  The manifest maps each selection to the files written,
    relative to ``output`` (default: ``<run dir>/plots``).
    """
    if not isinstance(report, dict):
        report, run_dir = load_report(report)
    run_dir = Path(run_dir or ".")
    selection = parse_selection(selection) if isinstance(selection, str) else list(selection or [])
    manifest = {}
    if not selection:
        return manifest
    out = Path(output or run_dir / "plots")
    out.mkdir(parents=True, exist_ok=True)
    for sel in selection:
        files = _HANDLERS[sel](report, run_dir, out, png)
        manifest[sel] = [Path(f).relative_to(out).as_posix() for f in files]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest

