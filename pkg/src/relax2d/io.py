"""CSV, legacy-VTK and grid snapshot readers/writers.

CSV cells are written at full precision (``repr`` of the float), so a file
parsed with :func:`read_csv` and written again is byte-identical.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

__all__ = [
    "format_cell",
    "parse_cell",
    "write_csv",
    "read_csv",
    "write_vtk_structured",
    "write_vtk_quads",
    "save_grid",
    "load_grid",
]


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_cell(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_cell(v) for v in row])
    return path


def read_csv(path) -> Tuple[List[str], List[list]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[parse_cell(c) for c in row] for row in r]
    return header, rows


def _vtk_floats(arr) -> str:
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in np.atleast_2d(arr))


def write_vtk_structured(path, points: np.ndarray, dims: Tuple[int, int, int],
                         scalars: Dict[str, np.ndarray] = None,
                         vectors: Dict[str, np.ndarray] = None, title: str = "relax2d") -> Path:
    """Legacy ASCII STRUCTURED_GRID; ``points`` ordered with x varying fastest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npts = len(points)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_GRID",
        f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}",
        f"POINTS {npts} double",
        _vtk_floats(points),
    ]
    if scalars or vectors:
        lines.append(f"POINT_DATA {npts}")
    for name, vals in (scalars or {}).items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", _vtk_floats(np.asarray(vals).reshape(-1, 1))]
    for name, vals in (vectors or {}).items():
        lines += [f"VECTORS {name} double", _vtk_floats(vals)]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_vtk_quads(path, points: np.ndarray, quads: np.ndarray,
                    cell_scalars: Dict[str, np.ndarray] = None, title: str = "relax2d") -> Path:
    """Legacy ASCII UNSTRUCTURED_GRID of bilinear quadrilaterals (VTK cell type 9)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ncell = len(quads)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(points)} double",
        _vtk_floats(points),
        f"CELLS {ncell} {5 * ncell}",
        "\n".join("4 " + " ".join(str(int(i)) for i in q) for q in quads),
        f"CELL_TYPES {ncell}",
        "\n".join(["9"] * ncell),
    ]
    if cell_scalars:
        lines.append(f"CELL_DATA {ncell}")
        for name, vals in cell_scalars.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", _vtk_floats(np.asarray(vals).reshape(-1, 1))]
    path.write_text("\n".join(lines) + "\n")
    return path


def save_grid(grid, prefix) -> Tuple[Path, Path]:
    """Write ``<prefix>.bin`` (little-endian float64, row-major over
    (a11, a12, a21, a22)) and ``<prefix>_header.csv`` (delta, bounds, shape)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    binpath = prefix.with_name(prefix.name + ".bin")
    grid.values.astype("<f8").tofile(binpath)
    rows = [["delta", "", grid.delta, ""]]
    for name, (lo, hi), n, k in zip(("a11", "a12", "a21", "a22"), grid.bounds, grid.shape, grid.lo):
        rows.append([name, int(k), float(lo), float(hi)])
        rows.append([name + "_n", "", int(n), ""])
    header = write_csv(prefix.with_name(prefix.name + "_header.csv"), ["key", "lattice_lo", "value", "upper"], rows)
    return binpath, header


def load_grid(prefix):
    from .roc import Grid4

    prefix = Path(prefix)
    _, rows = read_csv(prefix.with_name(prefix.name + "_header.csv"))
    meta = {r[0]: r for r in rows}
    delta = float(meta["delta"][2])
    names = ("a11", "a12", "a21", "a22")
    lo = [int(meta[n][1]) for n in names]
    shape = tuple(int(meta[n + "_n"][2]) for n in names)
    values = np.fromfile(prefix.with_name(prefix.name + ".bin"), dtype="<f8").reshape(shape)
    return Grid4(delta, np.array(lo), values)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path
