"""Deblurring-view, novel-view and trajectory evaluation of a trained checkpoint."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np

from . import io
from .field import FieldParams
from .lie import PoseSE3, Trajectory
from .metrics import ate, psnr, ssim
from .render import render_image

logger = logging.getLogger(__name__)

Renderer = Callable[[PoseSE3], np.ndarray]


def mid_exposure_pose(traj: Trajectory, exposure) -> PoseSE3:
    return traj.pose_at(0.5 * (exposure[0] + exposure[1]))


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _image_entry(name: str, img: np.ndarray, gt_path: Path) -> dict:
    if not gt_path.is_file():
        logger.warning("%s: ground truth %s missing, image metrics skipped", name, gt_path)
        return dict(name=name, psnr=None, ssim=None)
    gt = io.read_pfm(gt_path)
    return dict(name=name, psnr=psnr(np.clip(img, 0, 1), gt), ssim=ssim(np.clip(img, 0, 1), gt))


def evaluate(manifest: io.Manifest, root, trajectories: list[Trajectory], renderer: Renderer,
             image_dir=None) -> dict:
    """Report image metrics for deblurring and novel views plus per-view ATE.

    ``renderer`` maps a pose to an ``(H, W, 3)`` image. Deblurring views are
    rendered at the learned trajectory's mid-exposure pose.
    """
    root = Path(root)
    if len(trajectories) != len(manifest.views):
        raise ValueError("checkpoint and dataset disagree on the number of views")
    deblur, blurry, ates, init_ates = [], [], [], []
    for v, traj in zip(manifest.views, trajectories):
        img = renderer(mid_exposure_pose(traj, v.exposure))
        if image_dir is not None:
            io.write_pfm(Path(image_dir) / f"{v.name}_deblur.pfm", img)
            io.write_ppm(Path(image_dir) / f"{v.name}_deblur.ppm", np.clip(img, 0, 1))
        deblur.append(_image_entry(v.name, img, root / v.sharp))
        blurry.append(_image_entry(v.name, io.read_pfm(root / v.blurry), root / v.sharp))
        if v.gt_trajectory is None or len(traj) < 2:
            if len(traj) < 2:
                logger.info("%s: single-pose trajectory, ATE skipped", v.name)
            ates.append(None)
            init_ates.append(None)
            continue
        truth = v.gt_trajectory.resample(traj.timestamps)
        ates.append(dict(name=v.name, **ate(traj, truth).to_dict()))
        frozen = Trajectory(traj.timestamps, [v.init_pose] * len(traj))
        init_ates.append(dict(name=v.name, **ate(frozen, truth).to_dict()))
    novel = []
    for n in manifest.novel:
        img = renderer(n.pose)
        if image_dir is not None:
            io.write_ppm(Path(image_dir) / f"{n.name}.ppm", np.clip(img, 0, 1))
        novel.append(_image_entry(n.name, img, root / n.sharp))

    def section(entries):
        return dict(views=entries, mean_psnr=_mean([e["psnr"] for e in entries]),
                    mean_ssim=_mean([e["ssim"] for e in entries]))

    def ate_section(entries):
        ok = [e for e in entries if e is not None]
        return dict(views=ok, mean_trans_rmse=_mean([e["trans_rmse"] for e in ok]),
                    mean_trans_std=_mean([e["trans_std"] for e in ok]),
                    mean_rot_rmse=_mean([e["rot_rmse"] for e in ok]))

    report = dict(deblur=section(deblur), novel=section(novel), blurry_input=section(blurry),
                  ate=ate_section(ates), ate_initial=ate_section(init_ates))
    both = [e["psnr"] for e in deblur + novel if e["psnr"] is not None]
    report["overall_mean_psnr"] = _mean(both)
    report["overall_mean_ssim"] = _mean([e["ssim"] for e in deblur + novel if e["ssim"] is not None])
    return report


def field_renderer(field: FieldParams, manifest: io.Manifest, n_samples: int) -> Renderer:
    K = manifest.intrinsics
    return lambda pose: render_image(field, K, pose, n_samples)


def save_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, allow_nan=True))


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def is_perfect(report: dict) -> bool:
    return all(math.isinf(e["psnr"]) for e in report["deblur"]["views"] if e["psnr"] is not None)
