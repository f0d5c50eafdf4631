"""Figures for the report path (SVG via matplotlib)."""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PARAMS = {
    "font.family": "serif",
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "lines.markersize": 2,
    "figure.figsize": (3.4, 3.0),
    "svg.hashsalt": "diamond-bench",
    "svg.fonttype": "none",
}
COLORS = ["#08589e", "#e34a33", "#31a354", "#756bb1"]


def _save(fig, path):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".svg.tmp")
    os.close(fd)
    try:
        fig.savefig(tmp, format="svg", metadata={"Date": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.remove(tmp)


def scatter_with_contours(path, samples, log_density=None, title="", label="samples"):
    """2-D scatter over target log-density contours; 1-D data get a histogram."""
    samples = np.atleast_2d(samples)
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        if samples.shape[1] == 1:
            ax.hist(samples[:, 0], bins=60, density=True, color=COLORS[0], alpha=0.6, label=label)
            if log_density is not None:
                lo, hi = np.percentile(samples[:, 0], [0.1, 99.9])
                grid = np.linspace(lo - 0.5, hi + 0.5, 400)
                ax.plot(grid, np.exp(log_density(grid[:, None])), color=COLORS[1], label="target")
            ax.set_xlabel("$z$")
        else:
            pts = samples[:, :2]
            if log_density is not None:
                lo = pts.min(0) - 0.5
                hi = pts.max(0) + 0.5
                gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 120), np.linspace(lo[1], hi[1], 120))
                grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
                dens = np.exp(log_density(grid)).reshape(gx.shape)
                ax.contour(gx, gy, dens, levels=8, colors=COLORS[1], linewidths=0.6)
            shown = pts[: min(len(pts), 4000)]
            ax.scatter(shown[:, 0], shown[:, 1], s=1.5, color=COLORS[0], alpha=0.5, linewidths=0, label=label)
            ax.set_xlabel("$z_0$")
            ax.set_ylabel("$z_1$")
        ax.set_title(title)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def rstar_heatmap(path, grid_t, grid_tp, surface, title="effective inner time $r^*(t, t')$"):
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        masked = np.ma.masked_invalid(surface.T)
        mesh = ax.pcolormesh(grid_t, grid_tp, masked, shading="auto", cmap="viridis", vmin=0.0, vmax=1.0)
        fig.colorbar(mesh, ax=ax, label="$r^*$")
        ax.set_xlabel("$t$")
        ax.set_ylabel("$t'$")
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def reward_vs_nfe(path, curves: dict, title="mean reward vs. map evaluations"):
    """``curves`` maps a label to (nfe list, mean reward list)."""
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        for color, (label, (nfe, rew)) in zip(COLORS, curves.items()):
            ax.plot(nfe, rew, marker="o", color=color, label=label)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("map evaluations per sample")
        ax.set_ylabel("mean reward")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def loss_curve(path, losses, title="distillation loss"):
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        ax.plot(np.arange(1, len(losses) + 1), losses, color=COLORS[0])
        ax.set_yscale("log")
        ax.set_xlabel("window (100 iterations)")
        ax.set_ylabel("mean squared error")
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
