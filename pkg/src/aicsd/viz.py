"""Figures: ICS heatmaps, intra-class distribution grids, per-class IoU bars."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_ics_heatmap(matrix, path, title, vmin, vmax):
    """Render a C x C ICS matrix with class-index axes and a fixed colour range."""
    c = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    im = ax.imshow(matrix, cmap="viridis", vmin=vmin, vmax=vmax)
    ax.set_xticks(range(c))
    ax.set_yticks(range(c))
    ax.set_xlabel("class j")
    ax.set_ylabel("class i")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.text(0.5, 0.01, f"KL(G_i || G_j), shared scale [{vmin:.3g}, {vmax:.3g}]", ha="center", fontsize=7)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_distribution_grid(dist, hw, path, title, vmax):
    """One panel per class showing its spatial distribution reshaped to ``hw``."""
    c = dist.shape[0]
    cols = min(c, 4)
    rows = int(np.ceil(c / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows + 0.4), squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < c:
            ax.imshow(dist[k].reshape(hw), cmap="magma", vmin=0.0, vmax=vmax)
            ax.set_title(f"class {k}", fontsize=8)
    fig.suptitle(f"{title} (shared scale [0, {vmax:.3g}])", fontsize=9)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_class_iou_bars(per_method, path):
    """Grouped bars of mean per-class IoU, one group per class, one bar per method."""
    methods = list(per_method)
    if not methods:
        return
    c = len(next(iter(per_method.values())))
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * c, 3.2))
    x = np.arange(c)
    for k, m in enumerate(methods):
        ax.bar(x + (k - (len(methods) - 1) / 2) * width, np.nan_to_num(per_method[m]), width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([f"class {i}" for i in range(c)])
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
