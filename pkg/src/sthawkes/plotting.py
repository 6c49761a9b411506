"""Figures for the CLI report path. Every image is written next to a CSV
data twin holding exactly the plotted numbers, so checks can read data
instead of pixels.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import write_table  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
})


def _save(fig, stem: Path):
    fig.savefig(str(stem) + ".png", metadata=_PNG_META)
    plt.close(fig)


def write_matrix(path, m: np.ndarray):
    m = np.asarray(m, dtype=float)
    write_table(path, [f"c{j}" for j in range(m.shape[1])], [list(map(float, row)) for row in m])


def read_matrix(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        return np.array([[float(v) for v in line.strip().split(",")] for line in fh if line.strip()])


def heatmap(stem, matrix, bounds, title="", hotspots=(), vmax=None):
    """Cell means with rows along x and columns along y; hotspots outlined."""
    stem = Path(stem)
    m = np.asarray(matrix, dtype=float)
    write_matrix(str(stem) + ".csv", m)
    x0, x1, y0, y1 = bounds
    fig, ax = plt.subplots(figsize=(3.2, 6.0))
    im = ax.imshow(m.T, origin="lower", extent=(x0, x1, y0, y1), aspect="auto",
                   cmap="viridis", vmin=0, vmax=vmax)
    dx, dy = (x1 - x0) / m.shape[0], (y1 - y0) / m.shape[1]
    for r, c in hotspots:
        ax.add_patch(plt.Rectangle((x0 + r * dx, y0 + c * dy), dx, dy, fill=False, ec="r", lw=1.2))
    fig.colorbar(im, ax=ax, label="expected daily count")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, stem)


def gof_histogram(stem, edges, f_train, f_syn, title=""):
    """Binned training vs rescaled synthetic inter-arrival frequencies (overflow bin dropped from the plot)."""
    stem = Path(stem)
    edges = np.asarray(edges, dtype=float)
    rows = [[float(a), float(b), float(u), float(v)] for a, b, u, v in zip(edges[:-1], edges[1:], f_train, f_syn)]
    write_table(str(stem) + ".csv", ["lo", "hi", "training", "synthetic"], rows)
    fin = np.isfinite(edges[1:])
    mids = 0.5 * (edges[:-1] + edges[1:])[fin]
    w = np.diff(edges)[fin]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.bar(mids, np.asarray(f_train)[fin], width=w, alpha=0.5, label="training")
    ax.step(mids, np.asarray(f_syn)[fin], where="mid", color="k", lw=1, label="synthetic")
    ax.set_xlabel("inter-arrival time")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, stem)


def qq_plot(stem, theoretical, observed, title="Exp(1) QQ"):
    stem = Path(stem)
    write_table(str(stem) + ".csv", ["theoretical", "observed"],
                [[float(a), float(b)] for a, b in zip(theoretical, observed)])
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.plot(theoretical, observed, ".", ms=2)
    hi = float(max(np.max(theoretical, initial=1.0), np.max(observed, initial=1.0)))
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xlabel("Exp(1) quantile")
    ax.set_ylabel("residual")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, stem)


def loss_curves(stem, histories, key="critic_loss"):
    """One line per run; the twin has columns (run, epoch, value)."""
    stem = Path(stem)
    rows = [[k, e, float(h[key])] for k, hist in enumerate(histories) for e, h in enumerate(hist)]
    write_table(str(stem) + ".csv", ["run", "epoch", key], rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for k, hist in enumerate(histories):
        ax.plot([h[key] for h in hist], lw=0.8, label=f"run {k}")
    ax.set_xlabel("epoch")
    ax.set_ylabel(key.replace("_", " "))
    if 0 < len(histories) <= 10:
        ax.legend()
    fig.tight_layout()
    _save(fig, stem)


def accuracy_histogram(stem, accuracies):
    stem = Path(stem)
    write_table(str(stem) + ".csv", ["accuracy"], [[float(a)] for a in accuracies])
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    ax.hist(accuracies, bins=np.linspace(0, 1, 11), ec="k")
    ax.set_xlabel("top-k accuracy")
    ax.set_ylabel("combinations")
    fig.tight_layout()
    _save(fig, stem)
