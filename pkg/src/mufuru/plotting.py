"""Figures written next to the CSV outputs when ``--plot`` is given."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figsize(width=5.0):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * golden


def plot_metrics(rows, path, metric_label="metric"):
    """Metric curves per split from ``(step, epoch, split, loss, metric)`` rows."""
    with plt.rc_context(RC):
        fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        for split in dict.fromkeys(r[2] for r in rows):
            sel = [r for r in rows if r[2] == split]
            steps = [r[0] for r in sel]
            ax_loss.plot(steps, [r[3] for r in sel], marker="o", ms=2, lw=1, label=split)
            ax_metric.plot(steps, [r[4] for r in sel], marker="o", ms=2, lw=1, label=split)
        ax_loss.set_xlabel("mini-batch")
        ax_loss.set_ylabel("loss")
        ax_metric.set_xlabel("mini-batch")
        ax_metric.set_ylabel(metric_label)
        ax_metric.legend(frameon=False)
        # no Software tag, so identical data gives identical PNG bytes
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_op_weights(profile: np.ndarray, tokens, ops, path):
    """Grouped bars of average operation weight per input token."""
    profile = np.asarray(profile)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_figsize(6.0))
        width = 0.8 / len(ops)
        x = np.arange(len(tokens))
        for j, op in enumerate(ops):
            ax.bar(x + (j - (len(ops) - 1) / 2) * width, profile[:, j], width, label=op)
        ax.set_xticks(x)
        ax.set_xticklabels(tokens)
        ax.set_ylabel("average weight")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=min(len(ops), 4))
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_seed_results(results, path, metric_label):
    """Final metric per seed as a dot plot."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_figsize(4.0))
        seeds = [r["seed"] for r in results]
        ax.plot(seeds, [r["test_metric"] for r in results], "o")
        ax.set_xlabel("seed")
        ax.set_ylabel(metric_label)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
