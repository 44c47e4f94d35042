"""Artifact writers: CSV tables and the run-metadata JSON.

All writers are deterministic: floats are serialized with repr (shortest
round-trip form), missing values as empty fields, newlines are always "\\n",
and JSON keys are sorted. Reruns with identical inputs produce bit-identical
files; the only value that legitimately differs between reruns is the
wall-clock column of the step tables.
"""

import json
import os
import platform

import numpy as np

__all__ = [
    "format_value",
    "write_csv",
    "write_summary",
    "write_stats",
    "write_mask",
    "write_indicators",
    "write_solution",
    "write_flux",
    "write_errors",
    "write_metadata",
    "ensure_dir",
]


def format_value(v):
    """One CSV field: empty for None, repr for floats, plain text otherwise."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row) + "\n")


def write_summary(path, results, tol, k):
    """Per-step summary of an adaptive run (one StepResult per row)."""
    header = [
        "n",
        "TOL",
        "k",
        "recomputed_count",
        "recomputed_fraction",
        "energy_err",
        "l2_coarse_err",
        "wall_ms",
    ]
    rows = [
        (
            res.n,
            float(tol),
            int(k),
            int(res.recomputed.sum()),
            float(res.fraction),
            res.energy_err,
            res.l2_coarse_err,
            res.wall_ms,
        )
        for res in results
    ]
    write_csv(path, header, rows)


def write_stats(path, stats, tol, k):
    """Per-step summary of a two-phase run (stats dicts from run_upscaling)."""
    header = [
        "n",
        "TOL",
        "k",
        "recomputed_count",
        "recomputed_fraction",
        "energy_err",
        "l2_coarse_err",
        "wall_ms",
        "sat_min",
        "sat_max",
    ]
    rows = [
        (
            st["n"],
            float(tol),
            int(k),
            st["recomputed_count"],
            st["recomputed_fraction"],
            None,
            None,
            st["wall_ms"],
            st["sat_min"],
            st["sat_max"],
        )
        for st in stats
    ]
    write_csv(path, header, rows)


def write_mask(path, results):
    """Recompute mask per step and element (0/1 rows)."""
    rows = (
        (res.n, T, int(flag))
        for res in results
        for T, flag in enumerate(res.recomputed)
    )
    write_csv(path, ["n", "element", "recomputed"], rows)


def write_indicators(path, results):
    """Indicator values per step and element (coarse modes write sqrt(E))."""
    rows = (
        (
            res.n,
            T,
            float(res.indicators[T, 0]),
            float(res.indicators[T, 1]),
            float(res.indicators[T, 2]),
            int(res.recomputed[T]),
        )
        for res in results
        for T in range(len(res.recomputed))
    )
    write_csv(path, ["step", "element", "e_u", "e_f", "e_g", "recomputed"], rows)


def write_solution(path, mesh, values):
    """Coarse nodal solution with node coordinates."""
    coords = mesh.coarse_node_coords()
    names = ["x", "y", "z"][: mesh.dim]
    rows = (
        (i, *(float(c) for c in coords[i]), float(values[i]))
        for i in range(len(values))
    )
    write_csv(path, ["node_index", *names, "value"], rows)


def write_flux(path, mesh, sigma):
    """Face flux table: global face index, normal axis, face grid coordinates.

    The coordinate along the face's axis is the plane index (0..n_a), the
    others are the transverse cell indices.
    """
    from . import grid

    fs = grid.faces(mesh)
    d = mesh.dim
    header = ["face_index", "axis"] + [f"cell_index_{a}" for a in range(d)] + ["sigma"]

    def rows():
        for i in range(fs.n_faces):
            a = int(fs.axis[i])
            coord = [0] * d
            coord[a] = int(fs.plane[i])
            others = [b for b in range(d) if b != a]
            for j, b in enumerate(others):
                coord[b] = int(fs.transverse[i, j])
            yield (i, a, *coord, float(sigma[i]))

    write_csv(path, header, rows())


def write_errors(path, rows):
    """k-convergence table: one row per patch radius."""
    write_csv(path, ["k", "energy_err", "l2_coarse_err"], rows)


def write_metadata(path, config):
    """Resolved run configuration plus library versions, sorted and indented."""
    import scipy

    from . import __version__

    meta = dict(config)
    meta["versions"] = {
        "lodadapt": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
