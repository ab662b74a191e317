"""Post-hoc figures written next to the CSV outputs (PNG, Agg backend)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path, dpi=150):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=dpi, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def training_figure(log, path, window=10):
    """Episode reward per agent with its trailing mean +/- std band."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        n_agents = len(log.episodes[0].rewards) if log.episodes else 0
        ep = np.arange(1, len(log) + 1)
        for k in range(n_agents):
            mean, std = log.rolling(k, window)
            label = f"agent {k + 1}" if n_agents > 1 else "single agent"
            line, = ax.plot(ep, mean, lw=1.4, label=label)
            ax.fill_between(ep, mean - std, mean + std, color=line.get_color(), alpha=0.2, lw=0)
            ax.plot(ep, log.rewards(k), lw=0.6, alpha=0.5, color=line.get_color())
        ax.set_xlabel("episode")
        ax.set_ylabel("episode reward")
        ax.set_title(f"{log.mode} training (rolling {window})")
        if n_agents:
            ax.legend(loc="lower right")
        return _save(fig, path)


def tracking_figure(rows, path, title=""):
    """Reference vs actual tip path plus error over time; ``rows`` are (t, x_ref, y_ref, x_act, y_act)."""
    a = np.asarray(rows, dtype=float).reshape(-1, 5)
    t, xr, yr, xa, ya = a.T
    err = np.hypot(xr - xa, yr - ya)
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.4), gridspec_kw={"width_ratios": [1, 1.4]})
        ax0.plot(xr, yr, "k--", lw=1.0, label="reference")
        ax0.plot(xa, ya, lw=0.9, label="tip")
        ax0.set_aspect("equal", adjustable="datalim")
        ax0.set_xlabel("x (mm)")
        ax0.set_ylabel("y (mm)")
        ax0.legend(loc="upper right")
        ax1.plot(t, err, lw=0.8)
        ax1.set_xlabel("time (s)")
        ax1.set_ylabel("tracking error (mm)")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def point_figure(result, path, threshold=0.35, title=""):
    """Per-repetition error, rolling average and running success rate of a point task."""
    e = np.asarray(result.rep_errors, dtype=float)
    reps = np.arange(1, len(e) + 1)
    running = np.cumsum(result.rep_success) / reps
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.0))
        ax0.plot(reps, running, marker=".")
        ax0.set_ylim(-0.05, 1.05)
        ax0.set_xlabel("repetition")
        ax0.set_ylabel("success rate")
        ax1.plot(reps, e, marker=".", lw=0.6, label="repetition")
        ax1.plot(reps, result.rolling_average, lw=1.4, label="rolling average")
        ax1.axhline(threshold, color="k", ls=":", lw=0.8)
        ax1.set_xlabel("repetition")
        ax1.set_ylabel("error (mm)")
        ax1.legend(loc="upper right")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def comparison_figure(rows, path):
    """Bar chart of RMS / max error for each comparison-table row (dicts with label, rms, max)."""
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(rows) + 2), 3.2))
        ax.bar(x - 0.2, [r["rms"] for r in rows], 0.4, label="RMS")
        ax.bar(x + 0.2, [r["max"] for r in rows], 0.4, label="max")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("error (mm)")
        ax.legend()
        return _save(fig, path)
