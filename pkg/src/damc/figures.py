"""Evaluation figures rendered to image files alongside the report tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_psnr_series(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    series = report.series.get("psnr", [])
    ax.plot(series, marker="o", ms=3)
    ax.axhline(report.scalars.get("psnr", np.nan), ls="--", c="gray",
               label=f"mean {report.scalars.get('psnr', float('nan')):.2f} dB")
    ax.set_xlabel("held-out frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sync_scatter(envelope, aperture, path, corr=None) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(envelope, aperture, s=10)
    ax.set_xlabel("audio RMS envelope (detrended)")
    ax.set_ylabel("measured mouth aperture (px)")
    if corr is not None:
        ax.set_title(f"sync correlation r = {corr:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation_bars(reports, path, metric="sync_surrogate") -> Path:
    modes = [r.fusion_mode for r in reports]
    vals = [r.scalars.get(metric, np.nan) for r in reports]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.bar(modes, vals)
    ax.set_ylabel(metric)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_frame_comparison(pred_rgb, gt_rgb, path, title="") -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, img, name in zip(
        axes,
        [pred_rgb, gt_rgb, np.abs(np.asarray(pred_rgb) - np.asarray(gt_rgb))],
        ["rendered", "ground truth", "|difference|"],
    ):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_log(log, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for stage, style in (("coarse", "-"), ("fine", "--")):
        xs = [r["iter"] for r in log if r["stage"] == stage]
        ys = [r["mse"] for r in log if r["stage"] == stage]
        if xs:
            ax.semilogy(xs, ys, style, label=f"{stage} mse")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
