"""Figures written next to the CSV/JSON reports. Files only; no interactive backends."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata=_META)
    plt.close(fig)


def plot_spectrum(report, path, r: int | None = None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        idx = np.arange(1, len(report.ratio_before) + 1)
        ax.plot(idx, report.ratio_before, label="before", color="0.5")
        ax.plot(idx, report.ratio_after, label="after", color="C3")
        if r is not None:
            ax.axvline(r, ls=":", color="k", lw=0.8)
        ax.set_xlabel("r")
        ax.set_ylabel("accumulative ratio")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_training(traces: dict, path) -> None:
    """``traces`` maps a label to a MetricsTrace."""
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for i, (label, tr) in enumerate(sorted(traces.items())):
            ax0.plot(tr.iters, tr.losses, lw=0.7, color=f"C{i}", label=label)
            if tr.evals:
                it, acc, _ = zip(*tr.evals)
                ax1.plot(it, acc, marker="o", ms=3, color=f"C{i}", label=label)
        ax0.set_xlabel("iteration")
        ax0.set_ylabel("loss")
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("val accuracy")
        ax1.legend(frameon=False)
        _save(fig, path)


def plot_scaling(tables: dict, path) -> None:
    """``tables`` maps a block name to rows from :func:`hamkit.analyzer.scaling_table`."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (block, rows) in enumerate(sorted(tables.items())):
            ax.loglog([r["n"] for r in rows], [r["median"] for r in rows], marker="o", color=f"C{i}", label=block)
        ax.set_xlabel("n (tokens)")
        ax.set_ylabel("median forward time [s]")
        ax.legend(frameon=False)
        _save(fig, path)
