"""Figures for the report commands (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE_KW)
    plt.close(fig)
    return path


def _se(p, n):
    return np.sqrt(np.clip(p * (1 - p), 0, None) / n)


def plot_ablation(variants: dict, n, k, path):
    """Bar chart of recall@k (with ±1 SE) and R² per variant."""
    names = list(variants)
    rec = np.array([variants[v]["recall"] for v in names])
    r2 = np.array([variants[v]["r_squared"] for v in names])
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].bar(names, rec, yerr=_se(rec, n), color="#4c72b0", capsize=4)
    axes[0].set_ylabel(f"recall@{k}")
    axes[0].set_ylim(0, 1)
    axes[1].bar(names, r2, color="#dd8452")
    axes[1].set_ylabel("R²")
    axes[1].set_ylim(min(0.0, r2.min() - 0.05), 1)
    return _save(fig, path)


def plot_sweep(lengths: dict, n, k, path):
    """recall@k and R² against input sequence length."""
    Ls = sorted(int(L) for L in lengths)
    rec = np.array([lengths[L]["recall"] for L in Ls])
    r2 = np.array([lengths[L]["r_squared"] for L in Ls])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.errorbar(Ls, rec, yerr=_se(rec, n), marker="o", label=f"recall@{k}", capsize=3)
    ax.plot(Ls, r2, marker="s", label="R²")
    ax.set_xlabel("input sequence length")
    ax.set_xticks(Ls)
    ax.set_ylim(min(0.0, r2.min() - 0.05), 1)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_attention(alpha, path, feature_stride=None):
    """Heatmap of attention weights, timesteps as rows."""
    alpha = np.asarray(alpha)
    fig, ax = plt.subplots(figsize=(8, 1.0 + 0.5 * alpha.shape[0]))
    im = ax.imshow(alpha, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("feature")
    ax.set_ylabel("timestep")
    ax.set_yticks(range(alpha.shape[0]))
    ax.set_yticklabels([str(t + 1) for t in range(alpha.shape[0])])
    if feature_stride:
        ax.axvline(feature_stride - 0.5, color="white", lw=0.8)
    fig.colorbar(im, ax=ax, fraction=0.03)
    return _save(fig, path)


def plot_history(history, path):
    """Training and validation MSE per epoch."""
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ep, [h["train_mse"] for h in history], marker=".", label="train")
    ax.plot(ep, [h["val_mse"] for h in history], marker=".", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend()
    return _save(fig, path)
