"""SVG figures for reconstruction reports (matplotlib, Agg backend)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sturm1d import Potential  # noqa: E402

# fixed metadata keeps the SVG output byte-stable between runs
_SVG_META = {"Date": None, "Creator": "hexqg"}


def _save(fig, path):
    plt.rcParams["svg.hashsalt"] = "hexqg"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _name(e):
    (a, b), (c, d) = e
    return f"({a},{b})-({c},{d})"


def _pick(edges, limit=6):
    ranked = sorted(edges, key=lambda r: (not r["perturbed"],
                                          -max(abs(x) for x in r["recovered_modes"][1:] or [0])))
    return ranked[:limit]


def plot_samples(report, path, limit=6):
    """Pipeline samples of each edge observable with the harvested zeros."""
    edges = _pick(report["edges"], limit)
    fig, axes = plt.subplots(len(edges) or 1, 1, figsize=(7, 1.8 * max(1, len(edges))),
                             sharex=True, squeeze=False)
    for ax, rec in zip(axes[:, 0], edges):
        lam = np.array([p[0] for p in rec["samples"]])
        val = np.array([p[1] for p in rec["samples"]])
        clip = np.clip(val, -3 * np.median(np.abs(val)) - 1e-12, 3 * np.median(np.abs(val)) + 1e-12)
        ax.plot(lam, clip, lw=0.8)
        ax.axhline(0.0, color="0.6", lw=0.5)
        for z in rec["eigenvalues"]:
            ax.plot([z], [0.0], "o", ms=3, color="C3")
        label = "s" if rec["relation"] == "ratio" else "s/a"
        ax.set_ylabel(label, fontsize=8)
        ax.set_title(_name(rec["edge"]) + (" (perturbed)" if rec["perturbed"] else ""), fontsize=8)
    axes[-1, 0].set_xlabel("lambda")
    fig.tight_layout()
    return _save(fig, path)


def plot_potentials(report, path, limit=6):
    """Recovered against true potentials on the tracked edges."""
    edges = _pick(report["edges"], limit)
    z = np.linspace(0.0, 1.0, 201)
    fig, axes = plt.subplots(len(edges) or 1, 1, figsize=(5, 1.8 * max(1, len(edges))),
                             sharex=True, squeeze=False)
    for ax, rec in zip(axes[:, 0], edges):
        ax.plot(z, Potential(tuple(rec["true_modes"]))(z), color="0.3", lw=1.5, label="true")
        ax.plot(z, Potential(tuple(rec["recovered_modes"]))(z), "--", color="C1", lw=1.0,
                label="recovered")
        ax.set_title(f"{_name(rec['edge'])}  max mode error {rec['max_mode_error']:.1e}", fontsize=8)
    axes[0, 0].legend(fontsize=7)
    axes[-1, 0].set_xlabel("z")
    fig.tight_layout()
    return _save(fig, path)


def report_figures(report, outdir):
    os.makedirs(outdir, exist_ok=True)
    return [plot_samples(report, os.path.join(outdir, "samples.svg")),
            plot_potentials(report, os.path.join(outdir, "potentials.svg"))]
