"""Figures written next to the CSV tables."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def curves_vs_time(path, curves, ylabel, logy=True, title=None):
    """``curves`` maps a label to ``(t, y)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (t, y) in curves.items():
        ax.plot(t, y, label=str(label), lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def rate_plot(path, n, mean, err, slope, intercept, ylabel, title=None):
    """Log-log scatter with error bars and the fitted power law."""
    n = np.asarray(n, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(n, mean, yerr=err, fmt="o", capsize=3, label="estimate")
    ax.plot(n, np.exp(intercept) * n ** slope, "--", label=f"slope {slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def density_plot(path, x, densities, title=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in densities.items():
        ax.plot(x, y, label=str(label))
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)
