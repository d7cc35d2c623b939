"""Command-line entry point: ``mtmr {simulate,mask,train,eval,ablate,plot}``.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import multiprocessing as mp
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import plots
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, format_config, load_config
from .kspace import InfeasibleMaskError, make_mask
from .metrics import evaluate
from .phantom import (DatasetManifest, InvalidConfigError, PhantomConfig, build_dataset, dataset_hash,
                      load_sample)
from .seg_net import binarize
from .trainer import (ItfsPolicy, WeightSchedule, infer_samples, load_samples, read_history_csv, train,
                      volume_masks)

log = logging.getLogger("mtmr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get("MTMR_RUN_ROOT", "runs"))


def resolve_run_dir(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else run_root() / p


def phantom_config(cfg: ExperimentConfig) -> PhantomConfig:
    d = cfg.data
    return PhantomConfig(height=d.image_size, width=d.image_size, n_ellipses=d.n_ellipses,
                         lesion_count=d.lesion_count, n_classes=d.n_classes)


def ensure_data(cfg: ExperimentConfig, run_dir: Path) -> tuple[DatasetManifest, DatasetManifest]:
    """Use the configured manifests, or simulate train/test phantom splits under ``run_dir/data``."""
    d = cfg.data
    if d.manifest:
        train_m = DatasetManifest.load(d.manifest)
    else:
        train_m = build_dataset(phantom_config(cfg), d.n_train, d.seed, run_dir / "data", "train",
                                d.slices_per_volume, d.normalization)
    if d.test_manifest:
        test_m = DatasetManifest.load(d.test_manifest)
    else:
        test_m = build_dataset(phantom_config(cfg), d.n_test, d.seed + 1, run_dir / "data", "test",
                               d.slices_per_volume, d.normalization)
    return train_m, test_m


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    out = Path(args.out)
    try:
        m = build_dataset(phantom_config(cfg), args.n, args.seed, out, args.split,
                          cfg.data.slices_per_volume, cfg.data.normalization)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc}") from None
    print(m.path)
    print(f"sha256 {dataset_hash(out / args.split)}")
    return EXIT_OK


def cmd_mask(args) -> int:
    try:
        mask = make_mask(args.width, args.center_fraction, args.acceleration, args.seed)
    except (InfeasibleMaskError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mask.txt").write_text(mask.to_line() + "\n")
    plots.save_mask_image(mask, out / "mask.png", height=args.height or args.width)
    print(out / "mask.txt")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, run_dir: Path, resume=None, samples=None):
    tcfg = cfg.training_config()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(format_config(cfg))
    if samples is None:
        train_m, _ = ensure_data(cfg, run_dir)
        samples = load_samples(train_m, tcfg)
    state = train(tcfg, run_dir=run_dir, resume=resume, samples=samples,
                  progress=lambda s: log.info("epoch %d done, step %d", s.epoch, s.global_step))
    plots.save_loss_curves({run_dir.name: state.history}, run_dir / "loss_curves.png")
    return state


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    run_dir = resolve_run_dir(args.run_dir or cfg.output.run_dir)
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.exists():
        raise UsageError(f"checkpoint not found: {resume}")
    _train_one(cfg, run_dir, resume)
    print(run_dir / "final.ckpt")
    return EXIT_OK


def _eval_state(state, manifest: DatasetManifest, mask_seed: int, out: Path, n_images: int = 4):
    image, _, _ = load_sample(manifest, 0)
    masks = volume_masks(manifest, image.shape[1], state.config, mask_seed)
    samples = load_samples(manifest, state.config, dict(masks))
    report = evaluate(state, manifest, masks, samples=samples)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    if n_images:
        subset = samples[:n_images]
        mags, probs = infer_samples(state, subset)
        plots.save_error_maps(mags, [s.image.numpy() for s in subset], out / "error_maps.png")
        plots.save_overlays([s.image.numpy() for s in subset], binarize(probs),
                            [s.labels.numpy() for s in subset], out / "overlays.png")
    return report


def cmd_eval(args) -> int:
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise UsageError(f"checkpoint not found: {ck}")
    mp = Path(args.manifest)
    if not mp.exists():
        raise UsageError(f"manifest not found: {mp}")
    try:
        state = load_checkpoint(ck)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    mask_seed = args.mask_seed if args.mask_seed is not None else state.config.mask_seed + 1
    report = _eval_state(state, DatasetManifest.load(mp), mask_seed, Path(args.out))
    print(Path(args.out) / "report.json")
    log.info("mean: %s", report.mean)
    return EXIT_OK


def ablation_matrix(name: str) -> list[tuple[str, ItfsPolicy, WeightSchedule]]:
    """Named (run label, ITFS policy, weight schedule) rows of an ablation."""
    on, off = ItfsPolicy(enabled=True), ItfsPolicy(enabled=False)
    fixed = WeightSchedule(kind="fixed", fixed_alpha=0.5)
    expo = WeightSchedule(kind="exponential")
    if name == "table1":
        return [("neither", off, fixed), ("itfs", on, fixed), ("drlc", off, expo), ("itfs+drlc", on, expo)]
    if name == "table2":
        return [
            ("fixed-0.5", on, fixed),
            ("fixed-0.2", on, WeightSchedule(kind="fixed", fixed_alpha=0.2)),
            ("linear", on, WeightSchedule(kind="linear")),
            ("exponential", on, expo),
        ]
    raise UsageError(f"unknown ablation matrix {name!r} (expected table1 or table2)")


ABLATION_COLUMNS = ("run", "itfs", "schedule", "dice", "precision", "recall", "psnr", "ssim",
                    "zero_filled_psnr", "first_step_L_recon")


def _ablation_run(label: str, run_cfg: ExperimentConfig, samples, test_m: DatasetManifest,
                  run_dir: Path, eval_seed: int) -> dict:
    state = _train_one(run_cfg, run_dir, samples=samples)
    report = _eval_state(state, test_m, eval_seed, run_dir / "eval", n_images=0)
    fg = report.class_names[1]
    return {
        "run": label, "itfs": int(run_cfg.itfs.enabled), "schedule": _schedule_label(run_cfg.schedule),
        "dice": report.mean[f"dice_{fg}"], "precision": report.mean[f"precision_{fg}"],
        "recall": report.mean[f"recall_{fg}"], "psnr": report.mean["psnr"], "ssim": report.mean["ssim"],
        "zero_filled_psnr": report.zero_filled_psnr,
        "first_step_L_recon": state.history[0].l_recon if state.history else float("nan"),
    }


def run_ablation(cfg: ExperimentConfig, matrix: str, out_root: Path, jobs: int = 1) -> list[dict]:
    """Train and evaluate every row of an ablation matrix on shared data and seeds.

    With ``jobs > 1`` rows train in separate worker processes; each run still
    sees exactly the same samples, seeds and data order as in a serial sweep.
    """
    rows = ablation_matrix(matrix)
    out_root.mkdir(parents=True, exist_ok=True)
    train_m, test_m = ensure_data(cfg, out_root)
    samples = load_samples(train_m, cfg.training_config())
    jobs_args = []
    for label, itfs, schedule in rows:
        run_cfg = replace(cfg, itfs=replace(itfs, seed=cfg.itfs.seed), schedule=replace(
            schedule, t_scale=cfg.schedule.t_scale, final_epoch=cfg.schedule.final_epoch))
        jobs_args.append((label, run_cfg, samples, test_m, out_root / label, cfg.mask.eval_seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_ablation_run, *zip(*jobs_args)))
    else:
        results = [_ablation_run(*a) for a in jobs_args]
    (out_root / "ablation.csv").write_text(ablation_csv(results))
    plots.save_loss_curves({r["run"]: load_history(out_root / r["run"]) for r in results},
                           out_root / "loss_curves.png")
    return results


def _schedule_label(s: WeightSchedule) -> str:
    return f"fixed-{s.fixed_alpha!r}" if s.kind == "fixed" else s.kind


def load_history(run_dir: Path):
    return read_history_csv((run_dir / "loss_history.csv").read_text())


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out_root = resolve_run_dir(args.out or f"{cfg.output.run_dir}-{args.matrix}")
    ablation_matrix(args.matrix)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    run_ablation(cfg, args.matrix, out_root, args.jobs)
    print(out_root / "ablation.csv")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    if args.history:
        runs = {}
        for p in args.history:
            p = Path(p)
            if not p.exists():
                raise UsageError(f"history file not found: {p}")
            runs[p.parent.name or p.stem] = read_history_csv(p.read_text())
        plots.save_loss_curves(runs, out)
    elif args.report:
        p = Path(args.report)
        if not p.exists():
            raise UsageError(f"report not found: {p}")
        plots.save_metric_boxplot(list(csv.DictReader(io.StringIO(p.read_text()))), out)
    elif args.alpha_beta:
        plots.save_weight_schedules(out, epochs=args.alpha_beta)
    else:
        raise UsageError("plot needs --history, --report or --alpha-beta")
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtmr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic phantom dataset")
    s.add_argument("--config")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("mask", help="write a sampling mask and its trajectory image")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int)
    s.add_argument("--center-fraction", type=float, default=0.08)
    s.add_argument("--acceleration", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("train", help="train the joint model")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask-seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the ITFS/DRLC or weight-schedule ablation")
    s.add_argument("--config", required=True)
    s.add_argument("--matrix", default="table1")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1, help="train rows in this many worker processes")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot", help="plot loss histories, metric reports or the weight schedules")
    s.add_argument("--history", nargs="+")
    s.add_argument("--report")
    s.add_argument("--alpha-beta", type=int, metavar="EPOCHS")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
