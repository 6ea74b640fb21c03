"""Shared argument handling for the experiment scripts."""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from evdeblur.datagen import DatasetConfig
from evdeblur.experiment import ensure_dataset
from evdeblur.train import TrainConfig


def parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--out", default="runs", help="directory for the dataset, runs and summary")
    ap.add_argument("--iters", type=int, default=5000)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--lr-field", dest="lr_field", type=float, default=5e-3)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--fresh", action="store_true", help="ignore cached runs")
    return ap


def config(args, **kw) -> TrainConfig:
    base = dict(iters=args.iters, n_samples=args.samples, batch_rays=args.batch, lr_field=args.lr_field,
                seed=args.seed)
    base.update(kw)
    if base.get("p", 5) < 2:
        base["lam"] = 0.0
    return TrainConfig(**base)


def dataset(args) -> Path:
    return ensure_dataset(DatasetConfig(), Path(args.out) / "desk")


def write_summary(args, name: str, rows: list[dict]) -> None:
    path = Path(args.out) / f"{name}.json"
    path.write_text(json.dumps(rows, indent=1))
    print(f"summary: {path}")


def row(tag, report) -> dict:
    return dict(tag=tag, deblur_psnr=report["deblur"]["mean_psnr"], deblur_ssim=report["deblur"]["mean_ssim"],
                novel_psnr=report["novel"]["mean_psnr"], blurry_psnr=report["blurry_input"]["mean_psnr"],
                ate=report["ate"]["mean_trans_rmse"], ate_initial=report["ate_initial"]["mean_trans_rmse"],
                seconds=report["run"]["train_seconds"])
