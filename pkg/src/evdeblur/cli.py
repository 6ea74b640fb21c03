"""Command-line entry points: simulate a dataset, train, evaluate, render.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .datagen import DatasetConfig, make_dataset
from .errors import ConfigError, NumericalError
from .evaluate import evaluate, field_renderer, save_report
from .lie import PoseSE3
from .render import Intrinsics, render_image
from .train import MODES, TrainConfig, TrainData, checkpoint_trajectories, init_state, load_checkpoint, \
    save_checkpoint, train

logger = logging.getLogger("evdeblur")

RUN_FILE = "run.json"


@dataclass
class RunConfig:
    """Everything needed to reproduce one training run."""

    dataset: str
    out: str
    train: TrainConfig = field(default_factory=TrainConfig)
    threads: int = 1
    deterministic: bool = False

    def validate(self) -> None:
        self.train.validate()
        if not (Path(self.dataset) / "manifest.json").is_file():
            raise ConfigError(f"dataset: no manifest.json under {self.dataset}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


def configure_runtime(threads: int, deterministic: bool) -> None:
    torch.set_num_threads(threads)
    if deterministic:
        # fixed-order kernels; reductions on CPU then depend only on the thread count
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = DatasetConfig(seed=args.seed, theta=args.theta, noise_theta=args.noise_theta)
    if args.views is not None:
        cfg.n_views = args.views
    if args.res is not None:
        cfg.width = cfg.height = args.res
    if args.substeps is not None:
        cfg.substeps = args.substeps
    cfg.validate()
    manifest = make_dataset(cfg, args.out)
    root = Path(args.out)
    counts = [len(io.read_events_csv(root / v.events)) for v in manifest.views]
    print(f"manifest: {root / 'manifest.json'}")
    print(f"views: {len(manifest.views)} train, {len(manifest.novel)} novel, "
          f"{cfg.width}x{cfg.height}, theta {cfg.theta}")
    print(f"events: total {sum(counts)}, per view min {min(counts)} mean {np.mean(counts):.1f} max {max(counts)}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(seed=args.seed, mode=args.mode, p=args.p, lam=args.lam, theta=args.theta)
    for name in ("iters", "n_samples", "batch_rays", "lr_field", "lr_pose"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.hierarchical:
        cfg.hierarchical = True
    if args.float64:
        cfg.dtype = "float64"
    return cfg


def cmd_train(args) -> int:
    run = RunConfig(args.dataset, args.out, _train_config(args), args.threads, args.deterministic)
    run.validate()
    manifest = io.load_manifest(run.dataset)
    if abs(manifest.theta - run.train.theta) > 1e-12:
        logger.warning("training threshold %g differs from the dataset's %g", run.train.theta, manifest.theta)
    data = TrainData.from_manifest(manifest, run.dataset, run.train.p)
    if data.dropped_events:
        logger.info("%d events outside the exposure were ignored", data.dropped_events)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    state = init_state(run.train, data)
    train(state, data, run.train.iters, log_path=log_path, progress=args.verbose)
    save_checkpoint(state, out)
    (out / RUN_FILE).write_text(json.dumps(dict(run=run.to_dict(), intrinsics=manifest.intrinsics.to_dict()),
                                           indent=1))
    last = state.history[-1] if state.history else None
    print(f"checkpoint: {out}")
    if last:
        print(f"iter {last['iter']}: L_total {last['total']:.6f} L_blur {last['blur']:.6f} "
              f"L_event {last['event']:.5f} drift {last['drift']:.5f}")
    return 0


def _checkpoint_dir(args) -> Path:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "state.json").is_file():
        raise ConfigError(f"checkpoint: no state.json under {ckpt}")
    return ckpt


def cmd_eval(args) -> int:
    ckpt = _checkpoint_dir(args)
    if args.dataset is None or not (Path(args.dataset) / "manifest.json").is_file():
        raise ConfigError(f"dataset: no manifest.json under {args.dataset}")
    manifest = io.load_manifest(args.dataset)
    state = load_checkpoint(ckpt)
    trajs = checkpoint_trajectories(ckpt)
    image_dir = Path(args.out) if args.out else ckpt / "eval"
    image_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(manifest, args.dataset, trajs, field_renderer(state.field, manifest, state.cfg.n_samples),
                      image_dir=image_dir)
    report["checkpoint"] = dict(iteration=state.iteration, config_hash=state.cfg.digest(), mode=state.cfg.mode)
    save_report(image_dir / "report.json", report)
    print(f"report: {image_dir / 'report.json'}")
    for key in ("deblur", "novel", "blurry_input"):
        sec = report[key]
        if sec["mean_psnr"] is not None:
            print(f"{key}: PSNR {sec['mean_psnr']:.3f} SSIM {sec['mean_ssim']:.4f}")
    for key in ("ate", "ate_initial"):
        if report[key]["mean_trans_rmse"] is not None:
            print(f"{key}: trans RMSE {report[key]['mean_trans_rmse']:.5f}")
    return 0


def read_pose_file(path) -> list[PoseSE3]:
    """Poses as rows of 12 numbers (row-major 3x4 camera-to-world), or a JSON list of such rows."""
    text = Path(path).read_text()
    try:
        rows = json.loads(text)
    except json.JSONDecodeError:
        rows = [[float(x) for x in line.replace(",", " ").split()] for line in text.splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
    if not rows or any(len(r) != 12 for r in rows):
        raise ConfigError(f"pose file {path}: expected rows of 12 numbers")
    return [PoseSE3.from_row12(r) for r in rows]


def cmd_render(args) -> int:
    ckpt = _checkpoint_dir(args)
    if args.dataset is not None:
        K = io.load_manifest(args.dataset).intrinsics
    elif (ckpt / RUN_FILE).is_file():
        K = Intrinsics.from_dict(json.loads((ckpt / RUN_FILE).read_text())["intrinsics"])
    else:
        raise ConfigError("render needs --dataset when the checkpoint has no run.json")
    state = load_checkpoint(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(read_pose_file(args.poses)):
        img = render_image(state.field, K, pose, state.cfg.n_samples)
        io.write_pfm(out / f"render{i:03d}.pfm", img)
        io.write_ppm(out / f"render{i:03d}.ppm", np.clip(img, 0, 1))
        print(out / f"render{i:03d}.pfm")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--deterministic", action="store_true", help="force fixed-order kernels")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="evdeblur", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    sim.add_argument("--out", required=True)
    sim.add_argument("--views", type=int)
    sim.add_argument("--res", type=int, help="square image side in pixels")
    sim.add_argument("--theta", type=float, default=0.3)
    sim.add_argument("--noise-theta", dest="noise_theta", type=float, default=0.0)
    sim.add_argument("--substeps", type=int)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", parents=[common], help="optimize field and poses")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--p", type=int, default=5)
    tr.add_argument("--lambda", dest="lam", type=float, default=0.005)
    tr.add_argument("--theta", type=float, default=0.3)
    tr.add_argument("--mode", choices=MODES, default="full")
    tr.add_argument("--iters", type=int)
    tr.add_argument("--samples", dest="n_samples", type=int)
    tr.add_argument("--batch", dest="batch_rays", type=int)
    tr.add_argument("--lr-field", dest="lr_field", type=float)
    tr.add_argument("--lr-pose", dest="lr_pose", type=float)
    tr.add_argument("--hierarchical", action="store_true")
    tr.add_argument("--float64", action="store_true")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint against ground truth")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", help="directory for the report and renders (default CHECKPOINT/eval)")
    ev.set_defaults(func=cmd_eval)

    rd = sub.add_parser("render", parents=[common], help="render poses from a checkpoint")
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--poses", required=True, help="text file with 12 numbers per line or a JSON list")
    rd.add_argument("--out", required=True)
    rd.add_argument("--dataset", help="take intrinsics from this dataset")
    rd.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_runtime(args.threads, args.deterministic)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
