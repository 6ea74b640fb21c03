"""Synthetic ground truth: procedural scenes, shaken exposures, blurry frames and events.

Scenes are unions of axis-aligned boxes and spheres with constant density and
albedo, so the volume rendering integral along a ray is piecewise constant and
can be evaluated in closed form. That oracle renderer produces the sharp
frames; a blurry frame averages sharp frames over the exposure and the event
stream comes from per-pixel threshold crossings of log intensity.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .blur_events import EventStream
from .lie import PoseSE3, Trajectory, compose, exp
from .render import Intrinsics, camera_directions, to_gray, to_log

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" or "sphere"
    a: tuple  # box: min corner, sphere: center
    b: tuple  # box: max corner, sphere: (radius,)
    density: float
    color: tuple


@dataclass
class ProceduralScene:
    primitives: list[Primitive]
    bounds: tuple[tuple, tuple]
    # region the foreground objects occupy; defines the scene diameter
    diameter: float = 1.0
    # nearest intersected primitives kept per ray; the rest lie behind opaque surfaces
    max_hits: int = 8

    def _intervals(self, origins: np.ndarray, dirs: np.ndarray):
        """Entry/exit distances per (ray, primitive); misses give entry = exit = inf."""
        n = len(origins)
        t_in = np.full((n, len(self.primitives)), np.inf)
        t_out = np.full((n, len(self.primitives)), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            for k, prim in enumerate(self.primitives):
                if prim.kind == "box":
                    t0 = (np.asarray(prim.a) - origins) * inv
                    t1 = (np.asarray(prim.b) - origins) * inv
                    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
                    par = dirs == 0
                    inside = (origins >= np.asarray(prim.a)) & (origins <= np.asarray(prim.b))
                    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
                    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
                    enter, leave = lo.max(-1), hi.min(-1)
                else:
                    oc = origins - np.asarray(prim.a)
                    bq = (oc * dirs).sum(-1)
                    disc = bq * bq - ((oc * oc).sum(-1) - prim.b[0] ** 2)
                    root = np.sqrt(np.maximum(disc, 0.0))
                    enter = np.where(disc > 0, -bq - root, np.inf)
                    leave = np.where(disc > 0, -bq + root, -np.inf)
                hit = leave > enter
                t_in[:, k] = np.where(hit, enter, np.inf)
                t_out[:, k] = np.where(hit, leave, np.inf)
        return t_in, t_out

    def render_rays(self, origins: np.ndarray, dirs: np.ndarray, near: float, far: float,
                    return_weight: bool = False):
        """Exact volume rendering over ``[near, far]`` of unit-direction rays."""
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
        t_in, t_out = self._intervals(origins, dirs)
        dens = np.broadcast_to(np.array([p.density for p in self.primitives]), t_in.shape)
        cols = np.broadcast_to(np.array([p.color for p in self.primitives], dtype=np.float64),
                               t_in.shape + (3,))
        if t_in.shape[1] > self.max_hits:
            # primitives beyond the nearest few hits sit behind opaque material
            keep = np.argsort(t_in, 1, kind="stable")[:, :self.max_hits]
            t_in = np.take_along_axis(t_in, keep, 1)
            t_out = np.take_along_axis(t_out, keep, 1)
            dens = np.take_along_axis(dens, keep, 1)
            cols = np.take_along_axis(cols, keep[..., None], 1)
        t_in = np.clip(t_in, near, far)
        t_out = np.clip(t_out, near, far)
        n = len(dirs)
        knots = np.sort(np.concatenate([np.full((n, 1), near), t_in, t_out, np.full((n, 1), far)], 1), 1)
        seg_lo, seg_hi = knots[:, :-1], knots[:, 1:]
        mid = 0.5 * (seg_lo + seg_hi)
        inside = (t_in[:, None, :] <= mid[:, :, None]) & (mid[:, :, None] < t_out[:, None, :])
        wdens = inside * dens[:, None, :]
        sig = wdens.sum(-1)
        sig_col = np.einsum("nsk,nkc->nsc", wdens, cols)
        with np.errstate(invalid="ignore", divide="ignore"):
            color = np.where(sig[..., None] > 0, sig_col / sig[..., None], 0.0)
        tau = sig * (seg_hi - seg_lo)
        trans = np.exp(-(np.cumsum(tau, 1) - tau))
        w = trans * -np.expm1(-tau)
        rgb = (w[..., None] * color).sum(1)
        if return_weight:
            return rgb, w.sum(1)
        return rgb

    def render(self, K: Intrinsics, pose: PoseSE3, return_weight: bool = False):
        dirs = camera_directions(K) @ pose.rotation.T
        out = self.render_rays(pose.translation[None], dirs, K.near, K.far, return_weight)
        if return_weight:
            rgb, w = out
            return rgb.reshape(K.height, K.width, 3), w.reshape(K.height, K.width)
        return out.reshape(K.height, K.width, 3)

    def as_field(self):
        """Torch callable ``(positions, dirs) -> (rgb, sigma)`` for the sampled renderer."""
        def fn(pos: torch.Tensor, _dirs: torch.Tensor):
            sig = torch.zeros(pos.shape[:-1], dtype=pos.dtype)
            sig_col = torch.zeros(pos.shape, dtype=pos.dtype)
            for prim in self.primitives:
                if prim.kind == "box":
                    lo = torch.tensor(prim.a, dtype=pos.dtype)
                    hi = torch.tensor(prim.b, dtype=pos.dtype)
                    inside = ((pos >= lo) & (pos < hi)).all(-1)
                else:
                    c = torch.tensor(prim.a, dtype=pos.dtype)
                    inside = ((pos - c) ** 2).sum(-1) < prim.b[0] ** 2
                d = inside.to(pos.dtype) * prim.density
                sig = sig + d
                sig_col = sig_col + d[..., None] * torch.tensor(prim.color, dtype=pos.dtype)
            rgb = torch.where(sig[..., None] > 0, sig_col / sig.clamp_min(1e-12)[..., None],
                              torch.zeros_like(sig_col))
            return rgb, sig
        return fn


def desk_scene(seed: int = 7, tiles: int = 8) -> ProceduralScene:
    """Colored objects at several depths in front of a tiled, opaque backdrop."""
    rng = np.random.default_rng(seed)
    prims = []
    half, z0, z1 = 4.4, -2.0, -1.6
    edges = np.linspace(-half, half, tiles + 1)
    for i in range(tiles):
        for j in range(tiles):
            color = tuple(float(c) for c in rng.uniform(0.1, 0.9, 3))
            prims.append(Primitive("box", (edges[i], edges[j], z0), (edges[i + 1], edges[j + 1], z1),
                                   40.0, color))
    prims += [
        Primitive("box", (-1.1, -0.9, -0.9), (-0.3, -0.1, -0.3), 40.0, (0.85, 0.25, 0.2)),
        Primitive("box", (0.2, 0.3, -1.2), (0.9, 1.0, -0.8), 40.0, (0.15, 0.3, 0.85)),
        Primitive("box", (-0.6, 0.5, 0.3), (-0.2, 0.9, 0.7), 40.0, (0.95, 0.85, 0.2)),
        Primitive("sphere", (0.6, -0.5, 0.2), (0.45,), 40.0, (0.2, 0.8, 0.3)),
        Primitive("sphere", (-0.2, 0.0, -0.7), (0.3,), 40.0, (0.9, 0.9, 0.9)),
    ]
    return ProceduralScene(prims, ((-half, -half, z0), (half, half, 0.9)), diameter=2.6)


def look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> PoseSE3:
    """Camera-to-world pose at ``position`` whose -z axis points at ``target``."""
    back = np.asarray(position, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    return PoseSE3(np.stack([right, cam_up, back], 1), position)


def orbit_pose(yaw: float, pitch: float, radius: float) -> PoseSE3:
    pos = radius * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    return look_at(pos, np.zeros(3))


@dataclass
class ShakeTrajectory:
    """Camera shake over one exposure, perturbing ``center`` in the camera frame.

    With ``tau`` the normalized exposure time, the path parameter
    ``s = tau + warp * sin(2 pi tau) / (2 pi) - 1/2`` runs fast at the ends and
    slow mid-exposure when ``warp > 0``; the pose is
    ``center * exp(2 s * linear + 4 s^2 * curve)``.
    """

    center: PoseSE3
    linear: np.ndarray
    curve: np.ndarray
    exposure: tuple[float, float] = (0.0, 0.1)
    warp: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.warp < 1.0:
            raise ValueError("speed warp must lie in [0, 1) to keep the motion monotone")

    def tangent(self, t: float) -> np.ndarray:
        t0, t1 = self.exposure
        tau = (t - t0) / (t1 - t0)
        s = tau + self.warp * np.sin(2 * np.pi * tau) / (2 * np.pi) - 0.5
        return 2 * s * np.asarray(self.linear) + 4 * s * s * np.asarray(self.curve)

    def pose(self, t: float) -> PoseSE3:
        return compose(self.center, exp(self.tangent(t)))

    def sample(self, timestamps) -> Trajectory:
        return Trajectory(np.asarray(timestamps), [self.pose(float(t)) for t in timestamps])


def emit_events(logs: np.ndarray, times: np.ndarray, theta: float, rng: np.random.Generator | None = None,
                noise_theta: float = 0.0) -> EventStream:
    """Threshold-crossing events from log-intensity frames ``(M+1, H, W)``.

    Each pixel keeps a reference level; whenever log intensity moves a full
    threshold away from it an event fires and the reference steps by that
    threshold. Timestamps interpolate linearly within the substep. With
    ``noise_theta > 0`` each crossing uses a threshold jittered by a Gaussian.
    """
    _, H, W = logs.shape
    ref = logs[0].reshape(-1).copy()
    cols = {"t": [], "x": [], "y": [], "p": []}

    def draw(n):
        if noise_theta <= 0 or rng is None:
            return np.full(n, theta)
        return np.maximum(theta + noise_theta * rng.standard_normal(n), 0.2 * theta)

    thr = draw(H * W)
    for k in range(1, len(logs)):
        a, b = logs[k - 1].reshape(-1), logs[k].reshape(-1)
        while True:
            up = b - ref >= thr
            down = ref - b >= thr
            fire = up | down
            if not fire.any():
                break
            idx = np.nonzero(fire)[0]
            sign = np.where(up[idx], 1, -1)
            level = ref[idx] + sign * thr[idx]
            slope = b[idx] - a[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(slope != 0, (level - a[idx]) / slope, 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            cols["t"].append(times[k - 1] + frac * (times[k] - times[k - 1]))
            cols["x"].append(idx % W)
            cols["y"].append(idx // W)
            cols["p"].append(sign)
            ref[idx] = level
            thr[idx] = draw(len(idx))
    if not cols["t"]:
        return EventStream.empty()
    stream = EventStream(np.concatenate(cols["t"]), np.concatenate(cols["x"]),
                         np.concatenate(cols["y"]), np.concatenate(cols["p"]))
    return stream.sorted()


@dataclass
class Observation:
    blurry: np.ndarray
    events: EventStream
    trajectory: Trajectory  # ground truth at the substep times
    sharp_mid: np.ndarray
    logs: np.ndarray


def synthesize_observation(scene: ProceduralScene, K: Intrinsics, traj: ShakeTrajectory, substeps: int = 60,
                           theta: float = 0.3, noise_theta: float = 0.0,
                           rng: np.random.Generator | None = None) -> Observation:
    """Blurry frame, event stream and ground-truth path for one exposure.

    ``substeps + 1`` sharp frames are rendered at even times; the blurry frame
    is their trapezoidal time average.
    """
    if substeps < 50:
        raise ValueError("need at least 50 substeps for faithful blur and event synthesis")
    t0, t1 = traj.exposure
    times = np.linspace(t0, t1, substeps + 1)
    gt = traj.sample(times)
    frames = np.stack([scene.render(K, P) for P in gt.poses])
    blurry = 0.5 * (frames[:-1] + frames[1:]).mean(0)
    logs = to_log(to_gray(frames))
    events = emit_events(logs, times, theta, rng, noise_theta)
    sharp_mid = scene.render(K, traj.pose(0.5 * (t0 + t1)))
    return Observation(blurry, events, gt, sharp_mid, logs)


@dataclass
class DatasetConfig:
    n_views: int = 8
    n_novel: int = 2
    width: int = 64
    height: int = 64
    focal: float = 70.0  # at 64 px width; scales with resolution
    near: float = 2.0
    far: float = 8.2
    radius: float = 4.0
    yaw_range: float = 0.26  # rad, half-range of the training orbit
    pitch_range: float = 0.17
    exposure: float = 0.1  # seconds
    substeps: int = 60
    theta: float = 0.3
    noise_theta: float = 0.0
    shake_rot: float = 0.03  # rad, half-span of the linear rotation component
    shake_trans: float = 0.3  # scene units, half-span of the linear translation component
    shake_curve: float = 0.5  # curvature amplitude relative to the linear part
    speed_warp: float = 0.6
    init_rot: float = 0.02  # rad, bound on the coarse-pose rotation error
    init_trans_frac: float = 0.01  # bound on the translation error, fraction of scene diameter
    scene_seed: int = 7
    seed: int = 42

    def validate(self) -> None:
        from .errors import ConfigError
        if self.n_views < 1 or self.n_novel < 0:
            raise ConfigError("n_views must be >= 1 and n_novel >= 0")
        if self.width < 4 or self.height < 4:
            raise ConfigError("resolution must be at least 4x4")
        if self.substeps < 50:
            raise ConfigError("substeps must be >= 50")
        if self.theta <= 0 or self.noise_theta < 0:
            raise ConfigError("theta must be positive and noise_theta non-negative")
        if self.init_rot > 0.05 or self.init_trans_frac > 0.02:
            raise ConfigError("coarse-pose perturbation exceeds 0.05 rad / 2% of the scene diameter")
        if not 0 <= self.speed_warp < 1:
            raise ConfigError("speed_warp must lie in [0, 1)")

    def intrinsics(self) -> Intrinsics:
        f = self.focal * self.width / 64.0
        return Intrinsics(f, f, self.width / 2.0, self.height / 2.0, self.width, self.height,
                          self.near, self.far)


def _random_direction(rng: np.random.Generator, n: int = 3) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def _random_tangent(rng, rot: float, trans: float) -> np.ndarray:
    return np.concatenate([rot * _random_direction(rng), trans * _random_direction(rng)])


def view_poses(cfg: DatasetConfig) -> tuple[list[PoseSE3], list[PoseSE3]]:
    """Training poses on a jittered grid over the orbit; novel poses in between."""
    rng = np.random.default_rng(cfg.seed + 1)
    n = cfg.n_views
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    train = []
    for i in range(n):
        r, c = divmod(i, cols)
        yaw = cfg.yaw_range * (2 * (c + 0.5) / cols - 1) + 0.1 * cfg.yaw_range * rng.uniform(-1, 1)
        pitch = cfg.pitch_range * (2 * (r + 0.5) / rows - 1) + 0.1 * cfg.pitch_range * rng.uniform(-1, 1)
        train.append(orbit_pose(yaw, pitch, cfg.radius))
    novel = [orbit_pose(cfg.yaw_range * rng.uniform(-0.8, 0.8), cfg.pitch_range * rng.uniform(-0.8, 0.8),
                        cfg.radius) for _ in range(cfg.n_novel)]
    return train, novel


def pos_scale_for(cfg: DatasetConfig) -> float:
    """Scale mapping every point the renderer can sample into (-1, 1)."""
    K = cfg.intrinsics()
    train, novel = view_poses(cfg)
    corners = camera_directions(K, np.array([[0, 0], [K.width - 1, 0], [0, K.height - 1],
                                             [K.width - 1, K.height - 1]]))
    extent = 0.0
    for P in train + novel:
        for depth in (K.near, K.far):
            pts = P.apply(corners * depth)
            extent = max(extent, float(np.abs(pts).max()))
        extent = max(extent, float(np.abs(P.translation).max()))
    return 0.9 / (extent * 1.1)


def make_shake(cfg: DatasetConfig, center: PoseSE3, rng: np.random.Generator) -> ShakeTrajectory:
    linear = _random_tangent(rng, cfg.shake_rot, cfg.shake_trans)
    curve = cfg.shake_curve * _random_tangent(rng, cfg.shake_rot, cfg.shake_trans)
    return ShakeTrajectory(center, linear, curve, (0.0, cfg.exposure), cfg.speed_warp)


def make_dataset(cfg: DatasetConfig, out_dir, scene: ProceduralScene | None = None) -> io.Manifest:
    """Write a complete dataset (images, event CSVs, manifest) to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = scene or desk_scene(cfg.scene_seed)
    K = cfg.intrinsics()
    train, novel = view_poses(cfg)
    rng = np.random.default_rng(cfg.seed)
    views = []
    for i, center in enumerate(train):
        name = f"view{i:02d}"
        shake = make_shake(cfg, center, rng)
        obs = synthesize_observation(scene, K, shake, cfg.substeps, cfg.theta, cfg.noise_theta, rng)
        coarse = _random_tangent(rng, cfg.init_rot * rng.uniform(0.5, 1.0),
                                 cfg.init_trans_frac * scene.diameter * rng.uniform(0.5, 1.0))
        init_pose = compose(center, exp(coarse))
        try:
            io.write_pfm(out / f"{name}_blurry.pfm", obs.blurry)
            io.write_ppm(out / f"{name}_blurry.ppm", obs.blurry)
            io.write_pfm(out / f"{name}_sharp.pfm", obs.sharp_mid)
            io.write_events_csv(out / f"{name}_events.csv", obs.events)
        except OSError as e:
            raise OSError(f"failed writing view {name} under {out}: {e}") from e
        views.append(io.ViewRecord(name, (0.0, cfg.exposure), init_pose, f"{name}_blurry.pfm",
                                   f"{name}_events.csv", f"{name}_blurry.ppm", f"{name}_sharp.pfm",
                                   shake.pose(0.5 * cfg.exposure), obs.trajectory))
        log.info("%s: %d events", name, len(obs.events))
    novel_recs = []
    for j, P in enumerate(novel):
        name = f"novel{j:02d}"
        img = scene.render(K, P)
        io.write_pfm(out / f"{name}_sharp.pfm", img)
        io.write_ppm(out / f"{name}_sharp.ppm", img)
        novel_recs.append(io.NovelRecord(name, P, f"{name}_sharp.pfm"))
    manifest = io.Manifest(K, cfg.theta, views, novel_recs, pos_scale_for(cfg), asdict(cfg))
    io.save_manifest(out / "manifest.json", manifest)
    return manifest
