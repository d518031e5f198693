"""Matplotlib figures written next to the CSV and Netpbm artifacts."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .segmentation import GmmFit, apply_mask  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path: str | Path) -> None:
    # no Software/date metadata so reruns are byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _show_image(ax, image, title=None):
    ax.imshow(np.clip(image, 0.0, 1.0), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)


def plot_loss_history(rows, path: str | Path) -> None:
    it = np.array([r.iteration for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0), layout="constrained")
        ax.plot(it, [r.loss_rec for r in rows], lw=0.8, label="reconstruction")
        ax.plot(it, [r.loss_err for r in rows], lw=0.8, label="error prediction")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean absolute error")
        twin = ax.twinx()
        twin.plot(it, [r.alpha for r in rows], color="0.6", ls="--", lw=0.8)
        twin.set_ylabel("alpha", color="0.4")
        twin.set_ylim(0, 1.05)
        ax.legend(loc="upper right", frameon=False)
        _save(fig, path)


def plot_error_histogram(edges: np.ndarray, mass: np.ndarray, fit: GmmFit, path: str | Path) -> None:
    """Normalised histogram with both weighted mixture components and the threshold."""
    width = edges[1] - edges[0]
    xs = np.linspace(edges[0], edges[-1], 600)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0), layout="constrained")
        ax.bar(edges[:-1], mass, width=width, align="edge", color="0.75", edgecolor="none")
        for k, color in enumerate(("tab:blue", "tab:red")):
            w, mu, var = fit.weights[k], fit.means[k], fit.variances[k]
            pdf = w * np.exp(-0.5 * (xs - mu) ** 2 / var) / math.sqrt(2 * math.pi * var)
            ax.plot(xs, pdf * width, color=color, lw=1.0)
        ax.axvline(fit.threshold, color="k", lw=0.8, ls="--")
        ax.text(fit.threshold, ax.get_ylim()[1] * 0.9, f" T = {fit.threshold:.3f}", fontsize=8)
        ax.set_xlabel("predicted prediction error")
        ax.set_ylabel("fraction of components")
        _save(fig, path)


def plot_examples(targets, predictions, errors, masks, path: str | Path) -> None:
    """Columns are records; rows: target, prediction, predicted error, mask, masked body."""
    n = len(targets)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(5, n, figsize=(1.3 * n, 5.0), squeeze=False, layout="constrained")
        scale = max(float(np.max(errors)), 1e-12)
        for j in range(n):
            body = apply_mask(predictions[j], masks[j]).astype(np.float64) / 255.0
            cells = (targets[j], predictions[j], errors[j] / scale, masks[j].astype(float), body)
            for i, img in enumerate(cells):
                ax = axes[i, j]
                if i == 4:
                    checker = (np.indices(img.shape[:2]).sum(axis=0) % 2) * 0.15 + 0.8
                    ax.imshow(np.repeat(checker[..., None], 3, axis=2), interpolation="nearest")
                    ax.imshow(img, interpolation="nearest")
                    ax.set_xticks([])
                    ax.set_yticks([])
                else:
                    _show_image(ax, img)
        for i, label in enumerate(("target", "prediction", "pred. error", "mask", "body")):
            axes[i, 0].set_ylabel(label)
        _save(fig, path)


def plot_sweep(grid, path: str | Path) -> None:
    """One row per motor dimension for each of prediction, predicted error and mask."""
    n_m, steps = grid.motors.shape[:2]
    scale = max(float(grid.errors.max()), 1e-12)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3 * n_m, steps, figsize=(1.1 * steps, 3.3 * n_m), squeeze=False,
                                 layout="constrained")
        for d in range(n_m):
            for s in range(steps):
                _show_image(axes[3 * d, s], grid.images[d, s], f"m{d + 1}={grid.values[s]:+.2f}")
                _show_image(axes[3 * d + 1, s], grid.errors[d, s] / scale)
                _show_image(axes[3 * d + 2, s], grid.masks[d, s].astype(float))
        _save(fig, path)


def plot_metric_distribution(report, path: str | Path) -> None:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.6), layout="constrained")
        axes[0].hist(report.mask_match, bins=25, range=(0, 1), color="tab:blue")
        axes[0].set_xlabel("mask match")
        axes[1].hist(report.appearance_match[report.defined], bins=25, range=(0, 1), color="tab:green")
        axes[1].set_xlabel("appearance match")
        axes[0].set_ylabel("records")
        _save(fig, path)
