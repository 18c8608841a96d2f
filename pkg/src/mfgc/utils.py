"""Small shared helpers: omega weights, slope fits, deterministic CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = ["omega", "loglog_slope", "ratio_per_doubling", "write_csv", "read_csv", "fmt"]


def omega(N, indices):
    """Decay weight ``N ** (1 - #distinct indices)`` for a tuple of player indices."""
    if not 1 <= len(indices) <= 4:
        raise ValueError("omega takes between 1 and 4 indices")
    return float(N) ** (1 - len(set(indices)))


def loglog_slope(xs, ys):
    """Least-squares slope of ``log y`` against ``log x``."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    if xs.size < 2 or np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("slope fit needs at least two positive points")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


def ratio_per_doubling(values):
    """Successive ratios ``v[k] / v[k + 1]``."""
    v = np.asarray(values, float)
    return v[:-1] / v[1:]


def fmt(value):
    """Stable text form of a number for CSV output."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    """Write rows (sequences or dicts keyed by header) with fixed formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(k) for k in header]
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path):
    """Read a CSV written by :func:`write_csv` into (header, list of dict)."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return reader.fieldnames or [], rows
