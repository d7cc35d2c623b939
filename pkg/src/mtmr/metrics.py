"""Segmentation and reconstruction quality metrics plus per-volume evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SIZE_BINS = 6


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred, truth, class_id: int) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p, t = pred == class_id, truth == class_id
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        # nothing predicted: correct only if nothing was there
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def psnr(pred, ref) -> float:
    """PSNR in dB with peak ``max(ref)``, capped at ``PSNR_CAP`` (zero error hits the cap)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mse = np.mean((pred - ref) ** 2)
    peak = ref.max()
    if mse == 0:
        return PSNR_CAP
    if peak <= 0:
        return -PSNR_CAP
    return float(min(10 * math.log10(peak ** 2 / mse), PSNR_CAP))


def _gauss(x: np.ndarray) -> np.ndarray:
    # truncate=3.5 with sigma=1.5 gives a radius-5, i.e. 11x11, window
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=3.5, mode="reflect")


def ssim(pred, ref) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and peak ``max(ref)``.

    Border pixels within half a window of the edge are excluded from the mean.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if min(ref.shape) < SSIM_WIN:
        raise ValueError(f"image too small for SSIM: {ref.shape}, need >= {SSIM_WIN}")
    L = ref.max()
    if L <= 0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mx, my = _gauss(pred), _gauss(ref)
    vx = _gauss(pred * pred) - mx * mx
    vy = _gauss(ref * ref) - my * my
    cxy = _gauss(pred * ref) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = (SSIM_WIN - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def lesion_components(truth, class_id: int = 1) -> tuple[np.ndarray, int]:
    """Connected components (8-connectivity) of one class in a 2D or 3D label map."""
    truth = np.asarray(truth) == class_id
    structure = ndimage.generate_binary_structure(truth.ndim, truth.ndim)
    return ndimage.label(truth, structure=structure)


def component_dice(pred, truth, class_id: int = 1, margin: int = 2) -> list[tuple[int, float]]:
    """(pixel count, Dice) for every ground-truth component.

    Predicted pixels are attributed to a component when they fall inside the
    component dilated by ``margin`` pixels.
    """
    pred = np.asarray(pred) == class_id
    lab, n = lesion_components(truth, class_id)
    out = []
    for k in range(1, n + 1):
        g = lab == k
        region = ndimage.binary_dilation(g, iterations=margin) if margin else g
        p = pred & region
        out.append((int(g.sum()), 2 * float((p & g).sum()) / float(p.sum() + g.sum())))
    return out


def size_bins(sizes, n_bins: int = SIZE_BINS) -> np.ndarray:
    """Sextile (by default) edges of the component pixel counts."""
    return np.quantile(np.asarray(sizes, dtype=np.float64), np.linspace(0, 1, n_bins + 1)[1:-1])


@dataclass
class VolumeMetrics:
    volume_id: int
    dice: dict[str, float]
    precision: dict[str, float]
    recall: dict[str, float]
    psnr: float
    ssim: float
    n_slices: int


@dataclass
class MetricsReport:
    volumes: list[VolumeMetrics]
    class_names: list[str]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    size_stratified: list[dict] = field(default_factory=list)
    zero_filled_psnr: float | None = None

    def rows(self) -> list[dict[str, float]]:
        rows = []
        for v in self.volumes:
            row = {"volume_id": v.volume_id, "n_slices": v.n_slices, "psnr": v.psnr, "ssim": v.ssim}
            for name in self.class_names[1:]:
                row[f"dice_{name}"] = v.dice[name]
                row[f"precision_{name}"] = v.precision[name]
                row[f"recall_{name}"] = v.recall[name]
            rows.append(row)
        return rows

    def aggregate(self) -> None:
        rows = self.rows()
        keys = [k for k in rows[0] if k not in ("volume_id", "n_slices")]
        self.mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
        self.std = {k: float(np.std([r[k] for r in rows])) for k in keys}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()


def volume_metrics(volume_id: int, recon: np.ndarray, ref: np.ndarray, pred: np.ndarray,
                   truth: np.ndarray, class_names: list[str]) -> VolumeMetrics:
    """Metrics for one volume given stacked ``(S, H, W)`` slices.

    Dice/precision/recall use voxel counts over the whole stack, PSNR uses the
    volume's MSE and peak, SSIM is the mean of per-slice SSIM.
    """
    d, p, r = {}, {}, {}
    for cid, name in enumerate(class_names):
        if cid == 0:
            continue
        c = confusion(pred, truth, cid)
        d[name], p[name], r[name] = dice(c), precision(c), recall(c)
    s = float(np.mean([ssim(a, b) for a, b in zip(recon, ref)]))
    return VolumeMetrics(int(volume_id), d, p, r, psnr(recon, ref), s, int(len(ref)))


def build_report(volumes: dict[int, tuple], class_names: list[str], stratify_class: int | None = None,
                 zero_filled: dict[int, np.ndarray] | None = None) -> MetricsReport:
    """Assemble a report from ``{volume_id: (recon, ref, pred, truth)}`` stacks."""
    if not volumes:
        raise ValueError("empty split: nothing to evaluate")
    vms = [volume_metrics(v, *stacks, class_names) for v, stacks in sorted(volumes.items())]
    report = MetricsReport(vms, list(class_names))
    report.aggregate()
    if stratify_class is None and len(class_names) == 2:
        stratify_class = 1
    if stratify_class is not None:
        comps = []
        for vid, (_, _, pred, truth) in sorted(volumes.items()):
            for sl_pred, sl_truth in zip(pred, truth):
                comps += [(vid, n, dsc) for n, dsc in component_dice(sl_pred, sl_truth, stratify_class)]
        if comps:
            edges = size_bins([n for _, n, _ in comps])
            bins: dict[int, list[float]] = {}
            for _, n, dsc in comps:
                bins.setdefault(int(np.searchsorted(edges, n, side="right")), []).append(dsc)
            report.size_stratified = [
                {"size_bin": b, "count": len(v), "mean_dice": float(np.mean(v)), "median_dice": float(np.median(v))}
                for b, v in sorted(bins.items())
            ]
    if zero_filled is not None:
        report.zero_filled_psnr = float(np.mean([psnr(zero_filled[v], volumes[v][1]) for v in sorted(volumes)]))
    return report


def evaluate(state, manifest, masks: dict, batch_size: int = 32, samples=None) -> MetricsReport:
    """Free-running inference over a split, metrics per volume, aggregated by mean and std.

    ``masks`` maps each volume id to the sampling mask shared by its slices.
    """
    from .trainer import infer_samples, load_samples, zero_filled_magnitudes

    if len(manifest) == 0:
        raise ValueError("empty split: nothing to evaluate")
    if samples is None:
        samples = load_samples(manifest, state.config, dict(masks))
    mags, probs = infer_samples(state, samples, batch_size)
    preds = np.argmax(probs, axis=1)
    zf = zero_filled_magnitudes(samples)
    volumes, zero_filled = {}, {}
    for vid, idx in manifest.volumes().items():
        volumes[vid] = (
            mags[idx],
            np.stack([samples[i].image.numpy() for i in idx]),
            preds[idx],
            np.stack([samples[i].labels.numpy() for i in idx]),
        )
        zero_filled[vid] = zf[idx]
    return build_report(volumes, manifest.class_names, zero_filled=zero_filled)
