"""Figures written next to the CSV/JSON outputs.

Everything renders off-screen with the Agg backend; callers pass a path and
get a PNG. The numbers behind each figure are always written separately as
data, so the figures can be regenerated or restyled without rerunning.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _finish(fig, path) -> None:
    fig.savefig(path)
    plt.close(fig)


def curve_figure(curves: dict, path, xlabel: str, ylabel: str, logy: bool = True) -> None:
    """Line plot of ``{label: values}`` against their index."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for label, ys in curves.items():
            ys = np.asarray(ys, dtype=float)
            ax.plot(np.arange(len(ys)), ys, label=label, lw=1.2)
        if logy and all(np.all(np.asarray(v, dtype=float) > 0) for v in curves.values() if len(v)):
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(curves) > 1:
            ax.legend()
        _finish(fig, path)


def training_figure(rows, path, smooth: int = 25) -> None:
    """Episode loss (running mean) and validation accuracy on a twin axis."""
    loss = np.array([r.loss for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        if len(loss):
            w = max(1, min(smooth, len(loss)))
            run = np.convolve(loss, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(w - 1, len(loss)), run, color="C0", lw=1.2)
        ax.set_xlabel("episode")
        ax.set_ylabel("episode loss", color="C0")
        val = [(r.episode, r.val_accuracy) for r in rows if r.val_accuracy is not None]
        if val:
            ax2 = ax.twinx()
            ax2.spines["right"].set_visible(True)
            ax2.plot(*zip(*val), "o-", color="C1", ms=3, lw=1)
            ax2.set_ylabel("validation accuracy", color="C1")
        _finish(fig, path)


def ablation_figure(plot: dict, path) -> None:
    """Mean accuracy with 95% interval per ablation value, one line per seed."""
    categorical = any(isinstance(x, str) for s in plot["series"] for x in s["x"])
    labels = list(dict.fromkeys(x for s in plot["series"] for x in s["x"]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        n = max(1, len(plot["series"]))
        for j, s in enumerate(plot["series"]):
            if categorical:
                xs = np.array([labels.index(x) for x in s["x"]], dtype=float) + 0.08 * (j - (n - 1) / 2)
            else:
                xs = np.asarray(s["x"], dtype=float)
            ax.errorbar(xs, s["mean"], yerr=s["ci95"], fmt="o-", ms=3, lw=1, capsize=2,
                        label=f"seed {s['seed']}")
        if categorical:
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels)
        ax.set_xlabel(plot["axis"])
        ax.set_ylabel(f"{plot['k_shot']}-shot test accuracy")
        if n > 1:
            ax.legend()
        _finish(fig, path)


def _to_rgb(img) -> np.ndarray:
    arr = img.detach().cpu().numpy() if hasattr(img, "detach") else np.asarray(img)
    arr = np.clip((arr + 1.0) / 2.0, 0.0, 1.0)
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def sample_grid(aug, path, n_classes: int = 6) -> None:
    """Original, good and bad sample of the first image of a few classes."""
    from .metadm import Provenance

    by_source = {}
    for ex in aug.examples:
        if ex.source_index is not None:
            by_source.setdefault(ex.source_index, {})[ex.provenance] = ex.image
    first = {}
    for ex in aug.examples:
        if ex.provenance is Provenance.ORIGINAL and ex.class_id not in first:
            first[ex.class_id] = ex.source_index
    cols = [first[c] for c in sorted(first)][:n_classes]
    kinds = [p for p in Provenance if any(p in by_source[i] for i in cols)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(kinds), len(cols), figsize=(1.1 * len(cols), 1.1 * len(kinds)),
                                 squeeze=False)
        for r, kind in enumerate(kinds):
            for c, idx in enumerate(cols):
                ax = axes[r][c]
                ax.axis("off")
                img = by_source[idx].get(kind)
                if img is not None:
                    ax.imshow(_to_rgb(img), cmap="gray" if img.shape[0] == 1 else None, vmin=0, vmax=1)
            axes[r][0].set_title(kind.value, loc="left", fontsize=8)
        _finish(fig, path)
