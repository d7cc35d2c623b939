"""Static figure output (PNG) for masks, loss curves, error maps and overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def save_mask_image(mask, path, height: int | None = None) -> None:
    """Render the line mask as a black/white k-space trajectory image."""
    grid = mask.as_grid(height or mask.width)
    Image.fromarray((grid * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _epoch_band(history, attr):
    by_epoch: dict[int, list[float]] = {}
    for r in history:
        by_epoch.setdefault(r.epoch, []).append(getattr(r, attr))
    epochs = np.array(sorted(by_epoch))
    vals = [np.asarray(by_epoch[e]) for e in epochs]
    mean = np.array([v.mean() for v in vals])
    lo = np.array([np.percentile(v, 2.5) for v in vals])
    hi = np.array([np.percentile(v, 97.5) for v in vals])
    return epochs, mean, lo, hi


def save_loss_curves(runs: dict, path) -> None:
    """Per-epoch mean loss with a band covering 95% of the step losses, one line per run."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for ax, attr, title in zip(axes, ("l_recon", "l_seg", "l_total"), ("L_recon", "L_seg", "L_total")):
        for name, history in runs.items():
            if not history:
                continue
            ep, mean, lo, hi = _epoch_band(history, attr)
            line, = ax.plot(ep, mean, label=name)
            ax.fill_between(ep, lo, hi, color=line.get_color(), alpha=0.2)
        ax.set_title(title)
        ax.set_xlabel("epoch")
    axes[-1].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_weight_schedules(path, epochs: int = 10) -> None:
    from .trainer import WeightSchedule, alpha_beta

    t = np.arange(epochs + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in ("exponential", "linear"):
        sched = WeightSchedule(kind=kind, final_epoch=epochs)
        ab = np.array([alpha_beta(sched, int(e)) for e in t])
        ax.plot(t, ab[:, 0], label=f"alpha ({kind})")
        ax.plot(t, ab[:, 1], "--", label=f"beta ({kind})")
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_error_maps(recons, refs, path) -> None:
    n = len(refs)
    fig, axes = plt.subplots(3, n, figsize=(2.6 * n, 7.5), squeeze=False)
    for j, (rec, ref) in enumerate(zip(recons, refs)):
        axes[0, j].imshow(ref, cmap="gray", vmin=0, vmax=1)
        axes[1, j].imshow(rec, cmap="gray", vmin=0, vmax=1)
        axes[2, j].imshow(np.abs(rec - ref), cmap="inferno", vmin=0, vmax=0.25)
    for i, label in enumerate(("ground truth", "reconstruction", "|error|")):
        axes[i, 0].set_ylabel(label)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def save_overlays(images, preds, truths, path) -> None:
    """Ground-truth (green) and predicted (red) foreground contours over the image."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    for ax, img, pred, truth in zip(axes[0], images, preds, truths):
        ax.imshow(img, cmap="gray")
        if (truth > 0).any():
            ax.contour(truth > 0, levels=[0.5], colors="lime", linewidths=1)
        if (pred > 0).any():
            ax.contour(pred > 0, levels=[0.5], colors="red", linewidths=1)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def save_metric_boxplot(rows: list[dict], path) -> None:
    """Box plot of every per-volume metric column in a report CSV."""
    keys = [k for k in rows[0] if k not in ("volume_id", "n_slices")]
    fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 3.2), squeeze=False)
    for ax, k in zip(axes[0], keys):
        ax.boxplot([float(r[k]) for r in rows])
        ax.set_title(k, fontsize=8)
        ax.set_xticks([])
    fig.tight_layout()
    _save(fig, path)
