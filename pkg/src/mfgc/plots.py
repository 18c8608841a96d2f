"""Deterministic SVG plots of experiment CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import UnknownKind  # noqa: E402
from .utils import loglog_slope, read_csv  # noqa: E402

__all__ = ["emit_plots", "PLOT_KINDS", "index_pattern"]

PLOT_KINDS = ("decay", "convergence", "residual", "sde")

matplotlib.rcParams["svg.hashsalt"] = "mfgc"
matplotlib.rcParams["svg.fonttype"] = "none"


def index_pattern(indices):
    """Equality pattern of an index tuple, e.g. ``(3, 3, 5) -> "aab"``."""
    labels = {}
    out = []
    for v in indices:
        if v not in labels:
            labels[v] = "abcd"[len(labels)]
        out.append(labels[v])
    return "".join(out)


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _decay(rows, out_dir, stem):
    groups = {}
    for r in rows:
        idx = tuple(int(r[k]) for k in ("i", "j", "k", "l") if r.get(k) not in ("", None))
        groups.setdefault(index_pattern(idx), []).append((int(r["N"]), float(r["norm"]), float(r["omega"])))
    paths = []
    for pattern in sorted(groups):
        pts = sorted(groups[pattern])
        Ns = np.array([p[0] for p in pts], float)
        norms = np.array([p[1] for p in pts])
        omegas = np.array([p[2] for p in pts])
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        positive = norms > 0
        if np.any(positive):
            ax.loglog(Ns[positive], norms[positive], "o-", label="measured norm")
            ref = omegas * norms[positive][0] / omegas[positive][0]
            ax.loglog(Ns, ref, "--", label="omega scaling")
        else:
            ax.semilogx(Ns, norms, "o-", label="measured norm (identically zero)")
        ax.set_xlabel("N")
        ax.set_ylabel("derivative norm")
        ax.set_title(f"index class {pattern}")
        ax.legend()
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"{stem}_{pattern}.svg"))
    return paths


def _vs_n(rows, out_dir, stem, value_key, title, fit_inverse):
    by_n = {}
    for r in rows:
        by_n.setdefault(int(r["N"]), []).append(float(r[value_key]))
    Ns = np.array(sorted(by_n), float)
    vals = np.array([np.median(by_n[int(n)]) for n in Ns])
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.loglog(Ns, vals, "o-")
    ax.set_xlabel("N")
    ax.set_ylabel(value_key if len(by_n[int(Ns[0])]) == 1 else f"median {value_key}")
    ax.set_title(title)
    if fit_inverse and Ns.size >= 2 and np.all(vals > 0):
        slope = loglog_slope(1.0 / Ns, vals)
        ax.annotate(f"slope vs 1/N: {slope:.3f}", xy=(0.05, 0.08), xycoords="axes fraction")
    fig.tight_layout()
    return [_save(fig, out_dir / f"{stem}.svg")]


def emit_plots(csv_path, kind, out_dir=None):
    """Render a report CSV as SVG.

    Parameters
    ----------
    csv_path : path
    kind : {"decay", "convergence", "residual", "sde"}
        ``decay`` writes one file per index class; the others write one
        plot against N (``convergence`` adds a fitted slope vs 1/N).
    out_dir : path, optional
        Defaults to the CSV's directory.

    Returns
    -------
    list of Path

    Raises
    ------
    UnknownKind
    ValueError
        If the CSV has no data rows.
    """
    if kind not in PLOT_KINDS:
        raise UnknownKind(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    csv_path = Path(csv_path)
    _, rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} has no data rows")
    out_dir = Path(out_dir) if out_dir is not None else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = csv_path.stem
    if kind == "decay":
        return _decay(rows, out_dir, stem)
    if kind == "convergence":
        return _vs_n(rows, out_dir, stem, "err", "lift error vs N", True)
    if kind == "residual":
        return _vs_n(rows, out_dir, stem, "residual", "master residual vs N", True)
    return _vs_n(rows, out_dir, stem, "norm", "off-diagonal gradient norm vs N", False)
