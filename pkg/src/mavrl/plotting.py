"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_surface(grid: np.ndarray, radius: float, path, title: str = "") -> Path:
    """Contour map and 3-D surface side by side."""
    n = grid.shape[0]
    coords = np.linspace(-radius, radius, n)
    a, b = np.meshgrid(coords, coords, indexing="ij")
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(8, 3.6))
        ax = fig.add_subplot(1, 2, 1)
        cs = ax.contourf(b, a, grid, levels=20, cmap="viridis")
        ax.plot(0, 0, "r+", ms=8)
        ax.set_xlabel("direction 2")
        ax.set_ylabel("direction 1")
        fig.colorbar(cs, ax=ax, label="cross-entropy")
        ax3 = fig.add_subplot(1, 2, 2, projection="3d")
        ax3.plot_surface(b, a, grid, cmap="viridis", linewidth=0, antialiased=True)
        ax3.set_xlabel("direction 2")
        ax3.set_ylabel("direction 1")
        ax3.set_zlabel("loss")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_cka_bars(values: dict[str, float], path, title: str = "CKA") -> Path:
    labels = list(values)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 3))
        ax.bar(range(len(labels)), [values[k] for k in labels], color="tab:blue", width=0.6)
        ax.set_xticks(range(len(labels)), [k.replace("_", "\n") for k in labels])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("linear CKA")
        ax.set_title(title)
        return _save(fig, path)


def plot_training_curves(records: list[dict], path) -> Path:
    train = [r for r in records if r.get("kind") == "train"]
    val = [r for r in records if r.get("kind") == "val"]
    skip = {"step", "kind", "objective", "run", "wall_time", "loss"}
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        if train:
            steps = np.array([r["step"] for r in train])
            win = max(1, len(train) // 50)
            kernel = np.ones(win) / win
            for key in [k for k in train[0] if k not in skip] + ["loss"]:
                y = np.convolve([r[key] for r in train], kernel, mode="valid")
                ax1.plot(steps[win - 1:], y, label=key, lw=1.2 if key == "loss" else 0.8)
            ax1.set_xlabel("outer step")
            ax1.set_ylabel("loss (moving average)")
            ax1.legend(fontsize=7)
        if val:
            ax2.plot([r["step"] for r in val], [r["val_clean_accuracy"] for r in val], "o-")
            ax2.set_xlabel("outer step")
            ax2.set_ylabel("validation clean accuracy")
        return _save(fig, path)
