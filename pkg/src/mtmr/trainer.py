"""Joint reconstruction + segmentation training.

The loss weights follow an epoch-dependent schedule (fixed, linear or
exponential) and the segmentation input alternates between the ground-truth
image (teacher steps) and the network's own reconstruction (free-running
steps).  Inference is always free-running.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import checkpoint as ckpt
from .kspace import MeasuredKSpace, SamplingMask, ifft2c, magnitude, make_mask, undersample
from .phantom import DatasetManifest, load_sample
from .recon_net import ReconConfig, ReconNet, recon_init
from .seg_net import SegConfig, SegNet, seg_init

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("fixed", "linear", "exponential")
ITFS_SCHEDULES = ("alternate-steps", "bernoulli")
SEG_LOSSES = ("dice", "cross-entropy")
RECON_REDUCTIONS = ("mean", "sum")
DICE_SMOOTH = 0.1


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


# -- loss weighting ---------------------------------------------------------

@dataclass
class WeightSchedule:
    kind: str = "exponential"
    fixed_alpha: float = 0.5
    t_scale: float = 1.0
    floor: float = 0.05
    offset: float = 0.2
    final_epoch: int = 50  # linear kind reaches the floor here

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not 0 <= self.fixed_alpha <= 1:
            raise ValueError("fixed_alpha must lie in [0, 1]")


def alpha_beta(schedule: WeightSchedule, epoch: int) -> tuple[float, float]:
    """Reconstruction / segmentation loss weights for an epoch; they always sum to one."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    t = epoch * schedule.t_scale
    if schedule.kind == "fixed":
        alpha = schedule.fixed_alpha
    elif schedule.kind == "exponential":
        e = math.exp(-t)
        if e - schedule.offset > schedule.floor:
            # beta from the complementary expression so that epoch 0 gives exactly (0.8, 0.2)
            return e - schedule.offset, (1 - e) + schedule.offset
        alpha = schedule.floor
    else:
        start = 1 - schedule.offset
        slope = (start - schedule.floor) / max(schedule.final_epoch * schedule.t_scale, 1e-12)
        alpha = min(max(start - slope * t, schedule.floor), 1.0)
    return alpha, 1 - alpha


@dataclass
class ItfsPolicy:
    enabled: bool = True
    teacher_ratio: float = 0.5
    schedule: str = "alternate-steps"
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ITFS_SCHEDULES:
            raise ValueError(f"ITFS schedule must be one of {ITFS_SCHEDULES}, got {self.schedule!r}")
        if not 0 <= self.teacher_ratio <= 1:
            raise ValueError("teacher_ratio must lie in [0, 1]")

    def is_teacher(self, step: int) -> bool:
        """Whether global step ``step`` feeds the ground truth to the segmentation net."""
        if not self.enabled:
            return False
        r = self.teacher_ratio
        if self.schedule == "alternate-steps":
            # evenly spread: step s is a teacher step when floor(s*r) advances
            return math.floor(step * r) > math.floor((step - 1) * r)
        return bool(np.random.default_rng([self.seed, step]).random() < r)


# -- losses -----------------------------------------------------------------

def recon_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared error between the reconstruction and the fully sampled image.

    ``mean`` averages over every pixel; ``sum`` is the squared L2 norm of each
    ``(H, W)`` image, averaged over any leading batch dimensions.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum(dim=(-2, -1)).mean()
    raise ValueError(f"reduction must be one of {RECON_REDUCTIONS}, got {reduction!r}")


def seg_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Smoothed soft-Dice loss averaged over foreground classes.

    ``probs`` is ``(B, C, H, W)`` (or ``(C, H, W)``); sums run over the batch
    and all pixels, so empty-annotation slices still penalise false positives
    through the other slices in the batch.
    """
    labels = torch.as_tensor(labels)
    if probs.ndim == 3:
        probs, labels = probs[None], labels[None]
    n_classes = probs.shape[1]
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels out of range for {n_classes} classes")
    onehot = F.one_hot(labels.long(), n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    d = 1.0 - 2.0 * inter / (probs.sum(dims) + onehot.sum(dims) + DICE_SMOOTH)
    return d[1:].mean()


def seg_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels.long())


# -- config and state -------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 1.0
    lr_decay_every: int = 10
    seg_loss: str = "dice"
    recon_reduction: str = "mean"
    recon_lr_scale: float = 1.0  # reconstruction-net learning rate = lr * recon_lr_scale
    seed: int = 0
    center_fraction: float = 0.08
    acceleration: float = 4.0
    mask_seed: int = 0
    checkpoint_every: int = 0
    schedule: WeightSchedule = field(default_factory=WeightSchedule)
    itfs: ItfsPolicy = field(default_factory=ItfsPolicy)
    recon: ReconConfig = field(default_factory=ReconConfig)
    seg: SegConfig = field(default_factory=SegConfig)

    def __post_init__(self):
        if self.seg_loss not in SEG_LOSSES:
            raise ValueError(f"seg_loss must be one of {SEG_LOSSES}")
        if self.recon_reduction not in RECON_REDUCTIONS:
            raise ValueError(f"recon_reduction must be one of {RECON_REDUCTIONS}")
        if self.recon_lr_scale <= 0:
            raise ValueError("recon_lr_scale must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        nested = {"schedule": WeightSchedule, "itfs": ItfsPolicy, "recon": ReconConfig, "seg": SegConfig}
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = nested[f.name](**d[f.name]) if f.name in nested else d[f.name]
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**kw)


@dataclass
class StepRecord:
    step: int
    epoch: int
    alpha: float
    beta: float
    teacher: bool
    l_recon: float
    l_seg: float
    l_total: float


@dataclass
class Sample:
    image: torch.Tensor        # (H, W) fully sampled magnitude
    kspace: torch.Tensor       # (2, H, W) masked k-space
    weights: torch.Tensor      # (1, 1, W) line mask
    labels: torch.Tensor       # (H, W) int64
    volume_id: int = 0


@dataclass
class TrainState:
    recon: ReconNet
    seg: SegNet
    optimizer: torch.optim.Optimizer
    config: TrainingConfig
    epoch: int = 0
    global_step: int = 0
    history: list[StepRecord] = field(default_factory=list)

    @property
    def schedule(self) -> WeightSchedule:
        return self.config.schedule

    @property
    def itfs(self) -> ItfsPolicy:
        return self.config.itfs


def make_optimizer(recon: ReconNet, seg: SegNet, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam([
        {"params": list(recon.parameters()), "name": "recon"},
        {"params": list(seg.parameters()), "name": "seg"},
    ], lr=lr)


def init_state(config: TrainingConfig, dtype=torch.float32) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    recon = recon_init(config.recon, int(seeds[0]), dtype)
    seg = seg_init(config.seg, int(seeds[1]), dtype)
    return TrainState(recon, seg, make_optimizer(recon, seg, config.lr), config)


def current_lr(config: TrainingConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch // max(config.lr_decay_every, 1))


# -- data -------------------------------------------------------------------

def volume_mask(width: int, config: TrainingConfig, volume_id: int, mask_seed: int | None = None) -> SamplingMask:
    """The single mask shared by every slice of a volume."""
    base = config.mask_seed if mask_seed is None else mask_seed
    seed = int(np.random.SeedSequence([base, volume_id]).generate_state(1)[0])
    return make_mask(width, config.center_fraction, config.acceleration, seed)


def volume_masks(manifest: DatasetManifest, width: int, config: TrainingConfig,
                 mask_seed: int | None = None) -> dict[int, SamplingMask]:
    return {v: volume_mask(width, config, v, mask_seed) for v in manifest.volumes()}


def make_sample(image: np.ndarray, labels: np.ndarray, mask: SamplingMask, volume_id: int = 0,
                dtype=torch.float32) -> Sample:
    m = undersample(image, mask, dtype=dtype)
    return Sample(
        torch.as_tensor(image, dtype=dtype), m.kspace.data, m.line_weights().reshape(1, 1, -1),
        torch.as_tensor(labels, dtype=torch.int64), volume_id,
    )


def load_samples(manifest: DatasetManifest, config: TrainingConfig, masks: dict[int, SamplingMask] | None = None,
                 dtype=torch.float32) -> list[Sample]:
    samples = []
    for i in range(len(manifest)):
        image, labels, vid = load_sample(manifest, i)
        if masks is None:
            masks = {}
        if vid not in masks:
            masks[vid] = volume_mask(image.shape[1], config, vid)
        samples.append(make_sample(image, labels, masks[vid], vid, dtype))
    return samples


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Seeded permutation for an epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def collate(batch: list[Sample]):
    shapes = {tuple(s.image.shape) for s in batch}
    if len(shapes) != 1:
        raise ValueError(f"batch mixes image shapes {sorted(shapes)}")
    return (torch.stack([s.kspace for s in batch]), torch.stack([s.weights for s in batch]),
            torch.stack([s.image for s in batch]), torch.stack([s.labels for s in batch]))


# -- steps ------------------------------------------------------------------

def compute_losses(state: TrainState, batch: list[Sample], epoch: int, teacher: bool):
    """Forward both tasks and return (total, l_recon, l_seg, alpha, beta)."""
    k, w, target, labels = collate(batch)
    alpha, beta = alpha_beta(state.schedule, epoch)
    recon_mag = magnitude(state.recon(k, w))
    l_recon = recon_loss(recon_mag, target, state.config.recon_reduction)
    # the ground truth is a plain tensor, so teacher steps carry no gradient into recon
    seg_in = target if teacher else recon_mag
    logits = state.seg(seg_in)
    if state.config.seg_loss == "dice":
        l_seg = seg_loss(torch.softmax(logits, dim=1), labels)
    else:
        l_seg = seg_cross_entropy(logits, labels)
    total = alpha * l_recon + beta * l_seg
    return total, l_recon, l_seg, alpha, beta


def train_step(state: TrainState, batch: list[Sample]) -> tuple[TrainState, StepRecord]:
    if not batch:
        raise ValueError("empty batch")
    teacher = state.itfs.is_teacher(state.global_step)
    total, l_recon, l_seg, alpha, beta = compute_losses(state, batch, state.epoch, teacher)
    record = StepRecord(state.global_step, state.epoch, alpha, beta, teacher,
                        l_recon.item(), l_seg.item(), total.item())
    if not math.isfinite(record.l_total):
        raise NonFiniteLossError(f"non-finite loss at step {state.global_step}: {record}", record)
    lr = current_lr(state.config, state.epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr * (state.config.recon_lr_scale if group["name"] == "recon" else 1.0)
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.global_step += 1
    state.history.append(record)
    return state, record


def run_epoch(state: TrainState, samples: list[Sample]) -> TrainState:
    cfg = state.config
    order = epoch_order(cfg.seed, state.epoch, len(samples))
    for start in range(0, len(order), cfg.batch_size):
        train_step(state, [samples[i] for i in order[start:start + cfg.batch_size]])
    state.epoch += 1
    return state


def train(config: TrainingConfig, manifest: DatasetManifest | None = None, run_dir=None,
          resume=None, samples: list[Sample] | None = None, progress=None) -> TrainState:
    """Train for ``config.epochs`` epochs, optionally resuming from a checkpoint.

    Checkpoints land in ``run_dir`` every ``checkpoint_every`` epochs
    (``epoch_XXXX.ckpt``) plus ``final.ckpt``; the loss history goes to
    ``loss_history.csv``.
    """
    torch.use_deterministic_algorithms(True)
    if samples is None:
        if manifest is None:
            raise ValueError("either a manifest or pre-loaded samples is required")
        samples = load_samples(manifest, config)
    state = ckpt.load_checkpoint(resume, config) if resume is not None else init_state(config)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    while state.epoch < config.epochs:
        run_epoch(state, samples)
        if progress is not None:
            progress(state)
        if run_dir is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            ckpt.save_checkpoint(state, run_dir / f"epoch_{state.epoch:04d}.ckpt")
    if run_dir is not None:
        ckpt.save_checkpoint(state, run_dir / "final.ckpt")
        (run_dir / "loss_history.csv").write_text(history_csv(state.history))
    return state


@torch.no_grad()
def infer(state: TrainState, m: MeasuredKSpace) -> tuple[np.ndarray, np.ndarray]:
    """Free-running inference: returns (magnitude image, class probabilities)."""
    k = m.kspace.data.to(state.recon.blocks[0].convs[0].weight.dtype)
    squeeze = k.ndim == 3
    if squeeze:
        k = k[None]
    w = m.line_weights().to(k.dtype).reshape(1, 1, -1)
    mag = magnitude(state.recon(k, w))
    probs = torch.softmax(state.seg(mag), dim=1)
    if squeeze:
        return mag[0].numpy(), probs[0].numpy()
    return mag.numpy(), probs.numpy()


@torch.no_grad()
def infer_samples(state: TrainState, samples: list[Sample], batch_size: int = 32):
    """Batched free-running inference over prepared samples."""
    mags, probs = [], []
    for start in range(0, len(samples), batch_size):
        k, w, _, _ = collate(samples[start:start + batch_size])
        mag = magnitude(state.recon(k, w))
        mags.append(mag.numpy())
        probs.append(torch.softmax(state.seg(mag), dim=1).numpy())
    return np.concatenate(mags), np.concatenate(probs)


HISTORY_COLUMNS = ("step", "epoch", "alpha", "beta", "teacher", "L_recon", "L_seg", "L_total")


def history_csv(history: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.step, r.epoch, repr(r.alpha), repr(r.beta), int(r.teacher),
                    repr(r.l_recon), repr(r.l_seg), repr(r.l_total)])
    return buf.getvalue()


def read_history_csv(text: str) -> list[StepRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [StepRecord(int(r["step"]), int(r["epoch"]), float(r["alpha"]), float(r["beta"]),
                       bool(int(r["teacher"])), float(r["L_recon"]), float(r["L_seg"]), float(r["L_total"]))
            for r in rows]


def epoch_means(history: list[StepRecord], attr: str = "l_seg") -> np.ndarray:
    by_epoch: dict[int, list[float]] = {}
    for r in history:
        by_epoch.setdefault(r.epoch, []).append(getattr(r, attr))
    return np.array([np.mean(v) for _, v in sorted(by_epoch.items())])


def zero_filled_magnitudes(samples: list[Sample]) -> np.ndarray:
    return np.stack([magnitude(ifft2c(s.kspace)).numpy() for s in samples])


def history_to_json(history: list[StepRecord]) -> str:
    return json.dumps([asdict(r) for r in history])


def history_from_json(text: str) -> list[StepRecord]:
    return [StepRecord(**r) for r in json.loads(text)]

