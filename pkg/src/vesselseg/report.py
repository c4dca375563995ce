"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_training(history: list[dict], path) -> Path:
    steps = np.array([h["step"] for h in history])
    loss = np.array([h["loss"] for h in history])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.6, color="0.6", label="batch loss")
    if len(loss) >= 20:
        k = max(1, len(loss) // 50)
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, color="C0", label=f"loss ({k}-step mean)")
    ax.set_xlabel("step")
    ax.set_ylabel("Dice + CE loss")
    evals = [h for h in history if h.get("train_dice") is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot([h["step"] for h in evals], [h["train_dice"] for h in evals], "o-", color="C3", ms=3, label="train Dice")
        vals = [h for h in evals if h.get("val_dice") is not None]
        if vals:
            ax2.plot([h["step"] for h in vals], [h["val_dice"] for h in vals], "s--", color="C2", ms=3, label="val Dice")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("Dice")
        ax2.legend(loc="center right", fontsize=8)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_case_metrics(reports, path) -> Path:
    names = [r.case for r in reports]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3.5))
    ax.bar(x - 0.2, [r.dice for r in reports], width=0.4, label="Dice")
    ax.bar(x + 0.2, [r.cldice for r in reports], width=0.4, label="clDice")
    ax.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path, full_row: str) -> Path:
    """Horizontal bars of median Dice per method; ``full_row`` is highlighted."""
    labels = [r["method"] for r in rows]
    dice = [r["dice"] for r in rows]
    colors = ["C3" if m == full_row else "C0" for m in labels]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
    y = np.arange(len(labels))
    axes[0].barh(y, dice, color=colors)
    axes[0].set_yticks(y, labels, fontsize=8)
    axes[0].set_xlabel("Dice")
    axes[0].set_xlim(0, 1)
    axes[1].barh(y, [r["cldice"] for r in rows], color=colors)
    axes[1].set_xlabel("clDice")
    axes[1].set_xlim(0, 1)
    return _save(fig, path)
