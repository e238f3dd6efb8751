"""Report figures, rendered off-screen to image files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_probabilities(rows, path) -> Path:
    """Slide probabilities from the all-patch pass against the high-attention pass."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    labels = np.array([r.label for r in rows])
    p_all = np.array([r.probability for r in rows])
    p_top = np.array([np.nan if r.probability_top is None else r.probability_top for r in rows])
    for lab, color in ((0, "tab:blue"), (1, "tab:red")):
        sel = labels == lab
        ax.scatter(p_all[sel], p_top[sel], s=18, c=color, label=f"label {lab}", alpha=0.8)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("probability, all patches")
    ax.set_ylabel("probability, high-attention patches")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_training_curves(histories, path) -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for h in histories:
        ep = [r.epoch for r in h.epochs]
        a1.plot(ep, [r.loss for r in h.epochs], label=f"seed {h.seed}")
        a2.plot(ep, [r.val_auc for r in h.epochs], label=f"seed {h.seed}")
    a1.set_xlabel("epoch")
    a1.set_ylabel("train loss")
    a2.set_xlabel("epoch")
    a2.set_ylabel("validation AUC")
    a2.set_ylim(0, 1)
    a2.legend(fontsize=8)
    return _save(fig, path)


def plot_coverage(rows, path) -> Path:
    """Grouped bars of ROI hit probability per strategy and ROI size; ``rows`` are (strategy, size, p, se)."""
    strategies = list(dict.fromkeys(r[0] for r in rows))
    sizes = sorted({r[1] for r in rows})
    width = 0.8 / max(len(sizes), 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(strategies) + 2, 3.5))
    x = np.arange(len(strategies))
    for j, size in enumerate(sizes):
        vals = {r[0]: (r[2], r[3]) for r in rows if r[1] == size}
        p = [vals.get(s, (np.nan, 0))[0] for s in strategies]
        se = [vals.get(s, (0, 0))[1] for s in strategies]
        ax.bar(x + j * width, p, width, yerr=se, label=f"ROI {size} patches")
    ax.set_xticks(x + width * (len(sizes) - 1) / 2)
    ax.set_xticklabels(strategies, rotation=20, fontsize=8)
    ax.set_ylabel("P(bag hits ROI)")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_heatmap(score_map: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    m = np.ma.masked_invalid(score_map)
    im = ax.imshow(m, cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    return _save(fig, path)
