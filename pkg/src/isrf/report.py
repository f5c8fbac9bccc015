"""Evaluation reports: a tab-delimited metrics table (scene x metric x
method variant) plus matplotlib figures rendered alongside it."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

METRIC_COLUMNS = ("mean_iou", "accuracy", "map")


def write_report(rows, out_path, figures=True) -> Path:
    """``rows``: list of dicts with keys scene, method, mean_iou, accuracy,
    map.  Writes the delimited table to ``out_path`` and, when ``figures``
    is set, a grouped bar chart next to it."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["scene\tmethod\tmean_iou\taccuracy\tmap"]
    for r in rows:
        lines.append(
            f"{r['scene']}\t{r['method']}\t{r['mean_iou']:.4f}\t{r['accuracy']:.4f}\t{r['map']:.4f}"
        )
    out_path.write_text("\n".join(lines) + "\n")
    if figures and rows:
        _metrics_figure(rows, out_path.with_suffix(".png"))
    return out_path


def _metrics_figure(rows, fig_path):
    scenes = sorted({r["scene"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    fig, axes = plt.subplots(1, len(METRIC_COLUMNS), figsize=(4 * len(METRIC_COLUMNS), 3.2))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(scenes))
    for ax, metric in zip(np.atleast_1d(axes), METRIC_COLUMNS):
        for j, method in enumerate(methods):
            vals = []
            for s in scenes:
                match = [r[metric] for r in rows if r["scene"] == s and r["method"] == method]
                vals.append(match[0] if match else np.nan)
            ax.bar(x + j * width, vals, width=width, label=method)
        ax.set_title(metric)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(scenes, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0, 1.05)
    np.atleast_1d(axes)[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


def write_pr_curve(scores, gt, fig_path) -> None:
    """Precision-recall curve figure for one soft mask."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt).astype(bool).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(gt[order])
    n = np.arange(1, scores.size + 1)
    pos = max(int(gt.sum()), 1)
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.plot(tp / pos, tp / n)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


def write_training_curve(log_rows, fig_path) -> None:
    """Loss curve figure from (iter, loss_rgb, loss_feat, psnr) rows."""
    if not log_rows:
        return
    arr = np.asarray(log_rows, dtype=np.float64)
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.semilogy(arr[:, 0], arr[:, 1], label="loss_rgb")
    if np.any(arr[:, 2] > 0):
        ax1.semilogy(arr[:, 0], arr[:, 2], label="loss_feat")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2 = ax1.twinx()
    ax2.plot(arr[:, 0], arr[:, 3], color="tab:green", alpha=0.5)
    ax2.set_ylabel("psnr (dB)")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
