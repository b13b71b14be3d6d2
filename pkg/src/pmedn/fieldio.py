"""Text file formats for grids and fields, plus CSV exports.

A field file is a short header followed by one value per line::

    # pmedn field
    kind scalar            (grid | scalar | boundary | time)
    dimension 2
    counts 5 5
    extents 1 1
    times 0 0.5 1          (time fields only)
    values
    0.10000000000000001
    ...

Values are written with 17 significant digits so files round-trip exactly.
Time fields list all nodes of stamp 0, then stamp 1, and so on.
"""

import csv
from pathlib import Path

import numpy as np

from .grid import BoundaryField, Grid, GridError, ScalarField, TimeField

MAGIC = "# pmedn field"


def _fmt(x):
    return format(float(x), ".17g")


def _header(kind, grid, times=None):
    lines = [
        MAGIC,
        f"kind {kind}",
        f"dimension {grid.dimension}",
        "counts " + " ".join(str(c) for c in grid.counts),
        "extents " + " ".join(_fmt(e) for e in grid.extents),
    ]
    if times is not None:
        lines.append("times " + " ".join(_fmt(t) for t in times))
    return lines


def write_grid(path, grid):
    Path(path).write_text("\n".join(_header("grid", grid)) + "\n")


def write_field(path, f):
    """Write a ScalarField, BoundaryField or TimeField."""
    if isinstance(f, TimeField):
        lines = _header("time", f.grid, f.times)
        values = f.values.ravel()
    elif isinstance(f, BoundaryField):
        lines = _header("boundary", f.grid)
        values = f.values
    elif isinstance(f, ScalarField):
        lines = _header("scalar", f.grid)
        values = f.values
    else:
        raise TypeError(f"cannot write {type(f).__name__}")
    lines.append("values")
    lines.extend(_fmt(v) for v in values)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse(path):
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MAGIC:
        raise GridError(f"{path}: not a pmedn field file")
    head = {}
    i = 1
    while i < len(text) and text[i].strip() != "values":
        key, _, rest = text[i].strip().partition(" ")
        if key:
            head[key] = rest.split()
        i += 1
    try:
        grid = Grid(
            int(head["dimension"][0]),
            tuple(float(e) for e in head["extents"]),
            tuple(int(c) for c in head["counts"]),
        )
    except KeyError as exc:
        raise GridError(f"{path}: header is missing {exc}") from None
    values = np.array([float(v) for v in text[i + 1 :] if v.strip()]) if i < len(text) else None
    return head["kind"][0], grid, head, values


def read_grid(path):
    return _parse(path)[1]


def read_field(path):
    kind, grid, head, values = _parse(path)
    if kind == "scalar":
        return ScalarField(grid, values)
    if kind == "boundary":
        return BoundaryField(grid, values)
    if kind == "time":
        times = np.array([float(t) for t in head["times"]])
        return TimeField(grid, times, values.reshape(times.size, grid.size))
    raise GridError(f"{path}: kind {kind!r} holds no values")


def _coord_names(grid):
    return [f"x{a + 1}" for a in range(grid.dimension)]


def export_csv(path, f, label="value"):
    """CSV with coordinate columns, suitable for plotting."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        grid = f.grid
        if isinstance(f, TimeField):
            out.writerow(["t", *_coord_names(grid), label])
            for t, row in zip(f.times, f.values):
                for x, v in zip(grid.coords, row):
                    out.writerow([_fmt(t), *map(_fmt, x), _fmt(v)])
        elif isinstance(f, BoundaryField):
            out.writerow([*_coord_names(grid), "normal_axis", "normal_sign", label])
            for x, a, s, v in zip(
                grid.coords[grid.boundary], grid.normal_axis, grid.normal_sign, f.values
            ):
                out.writerow([*map(_fmt, x), int(a) + 1, int(s), _fmt(v)])
        else:
            out.writerow([*_coord_names(grid), label])
            for x, v in zip(grid.coords, f.values):
                out.writerow([*map(_fmt, x), _fmt(v)])
