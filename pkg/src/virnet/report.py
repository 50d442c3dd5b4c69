"""Figures written next to the CSV outputs of ``train`` and ``eval``."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _moving_average(v: np.ndarray, width: int) -> np.ndarray:
    if len(v) < width or width < 2:
        return v
    return np.convolve(v, np.ones(width) / width, mode="valid")


def plot_loss_trace(rows: list[dict], path, pixels: int | None = None) -> Path:
    it = np.array([r["iteration"] for r in rows])
    norm = 1.0 / pixels if pixels else 1.0
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    width = max(1, len(rows) // 50)

    neg = -np.array([r["total"] for r in rows]) * norm
    axes[0].semilogy(it[width - 1:] if width > 1 else it, np.maximum(_moving_average(neg, width), 1e-12))
    axes[0].set_title("negative ELBO" + (" per pixel" if pixels else ""))
    for key, label in (("kl_z", "KL z"), ("kl_sigma", "KL sigma^2")):
        v = np.maximum(np.array([r[key] for r in rows]) * norm, 1e-12)
        axes[1].semilogy(it[width - 1:] if width > 1 else it, _moving_average(v, width), label=label)
    axes[1].legend(frameon=False)
    axes[1].set_title("KL terms")
    axes[2].semilogy(it, [r["grad_norm"] for r in rows], lw=0.6, label="grad norm")
    ax2 = axes[2].twinx()
    ax2.semilogy(it, [r["lr"] for r in rows], color="C3", label="lr")
    axes[2].set_title("gradient norm / learning rate")
    for ax in axes:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_restoration_panels(samples: list[dict], path) -> Path:
    """One row per sample: corrupted, restored, clean, predicted std, true std."""
    cols = ["corrupted", "restored", "clean", "pred_std", "true_std"]
    titles = ["corrupted", "restored", "ground truth", "predicted std", "true std"]
    n = len(samples)
    fig, axes = plt.subplots(n, len(cols), figsize=(2.4 * len(cols), 2.4 * n), squeeze=False)
    for i, s in enumerate(samples):
        vmax = max(float(np.max(s[c])) for c in ("pred_std", "true_std") if s.get(c) is not None) \
            if any(s.get(c) is not None for c in ("pred_std", "true_std")) else 1.0
        for j, c in enumerate(cols):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            img = s.get(c)
            if img is None:
                ax.axis("off")
                continue
            if c.endswith("std"):
                ax.imshow(np.squeeze(img), cmap="magma", vmin=0, vmax=vmax)
            else:
                ax.imshow(np.squeeze(img), cmap="gray", vmin=0, vmax=1)
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
        if "psnr" in s:
            axes[i, 1].set_xlabel(f"{s['psnr']:.2f} dB", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metric_summary(rows: list[dict], path) -> Path:
    """PSNR of the corrupted input against PSNR of the restoration, per image."""
    fig, ax = plt.subplots(figsize=(4, 4))
    x = [r["psnr_input"] for r in rows if r.get("psnr_input") is not None]
    y = [r["psnr"] for r in rows if r.get("psnr_input") is not None]
    if x:
        ax.scatter(x, y, s=10)
        lo, hi = min(x + y), max(x + y)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("input PSNR (dB)")
    ax.set_ylabel("restored PSNR (dB)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
