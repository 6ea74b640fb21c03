"""Joint optimization of per-view pose sets and the radiance field.

Each training view owns ``p`` learnable poses spread evenly over its exposure.
A ray batch renders every sampled pixel from all ``p`` poses (sharing depth
samples), averages them into a predicted blurry pixel and differences their
log intensities into predicted event counts between adjacent poses. The loss
is ``lam * L_event + L_blur`` (plus a coarse-field blur term in hierarchical
mode), minimized with Adam over the field weights and the pose increments.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import autodiff, io
from .blur_events import bin_events, predict_events
from .errors import ConfigError, NumericalError
from .field import EncodingConfig, FieldParams, init_field
from .lie import PoseSE3, Trajectory, catmull_rom_weights, compose, even_timestamps, exp, exp_torch, inverse
from .lie import log as se3_log
from .render import Intrinsics, camera_directions, compositing_weights, render_rays, stratified_depths, to_gray, to_log

logger = logging.getLogger(__name__)

MODES = ("full", "noe", "linear", "cubic")


@dataclass
class TrainConfig:
    p: int = 5
    lam: float = 0.005
    theta: float = 0.3
    n_samples: int = 64
    batch_rays: int = 128
    iters: int = 5000
    lr_field: float = 5e-4
    lr_pose: float = 1e-3
    lr_decay: float = 0.1  # learning rates shrink by this factor over the run
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 42
    mode: str = "full"
    hierarchical: bool = False
    n_importance: int = 64
    width: int = 64
    depth: int = 4
    K_pos: int = 6
    K_dir: int = 2
    pose_jitter: float = 1e-3  # std of the symmetry-breaking tangent added to the initial pose copies
    quantize_events: bool = False
    dtype: str = "float32"
    log_every: int = 50

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.lam > 0 and self.p < 2 and self.mode != "noe":
            raise ConfigError("the event loss needs p >= 2 (set lam=0 or raise p)")
        if self.theta <= 0:
            raise ConfigError("theta must be positive")
        if self.n_samples < 1 or self.batch_rays < 1 or self.iters < 0:
            raise ConfigError("n_samples and batch_rays must be >= 1, iters >= 0")
        if self.mode in ("linear", "cubic") and self.p < 2:
            raise ConfigError(f"{self.mode} mode needs p >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def event_weight(self) -> float:
        """The effective event weight; the no-event ablation forces it to zero."""
        return 0.0 if self.mode == "noe" or self.p < 2 else self.lam

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# losses


def event_loss(predicted, observed):
    """Mean over pixels and adjacent-pose bins of the squared count difference."""
    if predicted.shape != observed.shape:
        raise ValueError(f"event grids differ in shape: {tuple(predicted.shape)} vs {tuple(observed.shape)}")
    return ((predicted - observed) ** 2).mean()


def blur_loss(predicted, observed):
    """Mean over pixels and channels of the squared difference."""
    if predicted.shape != observed.shape:
        raise ValueError(f"images differ in shape: {tuple(predicted.shape)} vs {tuple(observed.shape)}")
    return ((predicted - observed) ** 2).mean()


# ---------------------------------------------------------------------------
# learnable poses


def init_poses(coarse: list[PoseSE3], p: int, exposures) -> list[Trajectory]:
    """``p`` copies of each view's coarse pose at even times over its exposure."""
    return [Trajectory(even_timestamps(e[0], e[1], p), [P] * p) for P, e in zip(coarse, exposures)]


def _stack_poses(poses: list[list[PoseSE3]]):
    R = torch.tensor(np.array([[P.rotation for P in row] for row in poses]), dtype=torch.float64)
    t = torch.tensor(np.array([[P.translation for P in row] for row in poses]), dtype=torch.float64)
    return R, t


class PoseModel:
    """Per-view learnable poses in float64.

    ``full``/``noe``: ``p`` independent poses ``exp(delta_i) * base_i``.
    ``linear``: a start pose plus a twist; pose ``i`` is ``exp(u_i * twist) * start``.
    ``cubic``: a start pose plus twists to three further control poses (before,
    end, after), blended with uniform Catmull-Rom weights.
    Increments ``delta`` are folded into the bases after every optimizer step.
    """

    def __init__(self, trajectories: list[Trajectory], mode: str = "full", jitter: float = 0.0,
                 seed: int = 0):
        self.mode = mode
        self.timestamps = [tr.timestamps.copy() for tr in trajectories]
        self.p = len(trajectories[0])
        rng = np.random.default_rng(seed + 7919)
        n_views = len(trajectories)
        if mode in ("full", "noe"):
            poses = [[compose(exp(jitter * rng.standard_normal(6)), P) if jitter > 0 else P
                      for P in tr.poses] for tr in trajectories]
            self.base_R, self.base_t = _stack_poses(poses)
            self.delta = torch.zeros(n_views, self.p, 6, dtype=torch.float64, requires_grad=True)
            self.twist = None
        else:
            starts = [[tr.poses[0]] for tr in trajectories]
            self.base_R, self.base_t = _stack_poses(starts)
            self.delta = torch.zeros(n_views, 1, 6, dtype=torch.float64, requires_grad=True)
            k = 1 if mode == "linear" else 3
            self.twist = torch.tensor(jitter * rng.standard_normal((n_views, k, 6)), dtype=torch.float64,
                                      requires_grad=True)
            u = np.linspace(0.0, 1.0, self.p)
            if mode == "cubic":
                # blend weights for (before, end, after); the start's own log is zero
                self.blend = torch.tensor(np.array([catmull_rom_weights(x)[[0, 2, 3]] for x in u]))
            else:
                self.blend = torch.tensor(u)[:, None]

    def parameters(self) -> list[torch.Tensor]:
        return [self.delta] + ([self.twist] if self.twist is not None else [])

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {"pose_delta": self.delta}
        if self.twist is not None:
            out["pose_twist"] = self.twist
        return out

    def poses(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Current poses as ``R (V, p, 3, 3)``, ``t (V, p, 3)`` (differentiable)."""
        dR, dt = exp_torch(self.delta)
        R = dR @ self.base_R
        t = (dR @ self.base_t[..., None])[..., 0] + dt
        if self.twist is None:
            return R, t
        xi = torch.einsum("pk,vkc->vpc", self.blend, self.twist)
        iR, it = exp_torch(xi)
        return iR @ R, (iR @ t[..., None])[..., 0] + it

    @torch.no_grad()
    def fold(self) -> None:
        dR, dt = exp_torch(self.delta)
        self.base_t = (dR @ self.base_t[..., None])[..., 0] + dt
        self.base_R = dR @ self.base_R
        self.delta.zero_()

    @torch.no_grad()
    def trajectories(self) -> list[Trajectory]:
        R, t = self.poses()
        return [Trajectory(ts, [PoseSE3(R[v, i].numpy(), t[v, i].numpy()) for i in range(self.p)])
                for v, ts in enumerate(self.timestamps)]

    def state_dict(self) -> dict:
        d = dict(mode=self.mode, base_R=self.base_R.tolist(), base_t=self.base_t.tolist(),
                 delta=self.delta.detach().tolist(), timestamps=[ts.tolist() for ts in self.timestamps])
        if self.twist is not None:
            d["twist"] = self.twist.detach().tolist()
        return d

    def load_state_dict(self, d: dict) -> None:
        with torch.no_grad():
            self.base_R = torch.tensor(d["base_R"], dtype=torch.float64)
            self.base_t = torch.tensor(d["base_t"], dtype=torch.float64)
            self.delta.copy_(torch.tensor(d["delta"], dtype=torch.float64))
            if self.twist is not None:
                self.twist.copy_(torch.tensor(d["twist"], dtype=torch.float64))
        self.timestamps = [np.asarray(ts) for ts in d["timestamps"]]


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    """Training views flattened per pixel, with observed event bins for a given ``p``."""

    K: Intrinsics
    blurry: torch.Tensor  # (V, HW, 3)
    events: torch.Tensor  # (V, HW, p-1) signed counts
    dirs_cam: torch.Tensor  # (HW, 3)
    init_poses: list[PoseSE3]
    exposures: list[tuple[float, float]]
    names: list[str]
    pos_scale: float = 1.0
    dropped_events: int = 0

    @property
    def n_views(self) -> int:
        return self.blurry.shape[0]

    @classmethod
    def from_manifest(cls, manifest: io.Manifest, root, p: int) -> "TrainData":
        root = Path(root)
        K = manifest.intrinsics
        blurry, events, dropped = [], [], 0
        for v in manifest.views:
            blurry.append(io.read_pfm(root / v.blurry).reshape(-1, 3))
            if p >= 2:
                stream = io.read_events_csv(root / v.events)
                grid = bin_events(stream, even_timestamps(v.exposure[0], v.exposure[1], p), K.width, K.height)
                dropped += grid.dropped
                events.append(grid.counts.reshape(p - 1, -1).T)
            else:
                events.append(np.zeros((K.width * K.height, 0)))
        return cls(K, torch.tensor(np.stack(blurry)), torch.tensor(np.stack(events), dtype=torch.float64),
                   torch.tensor(camera_directions(K)), [v.init_pose for v in manifest.views],
                   [tuple(v.exposure) for v in manifest.views], [v.name for v in manifest.views],
                   manifest.pos_scale, dropped)

    @classmethod
    def load(cls, dataset_dir, p: int) -> "TrainData":
        return cls.from_manifest(io.load_manifest(dataset_dir), dataset_dir, p)


@dataclass
class Batch:
    views: torch.Tensor  # (B,)
    pixels: torch.Tensor  # (B,)
    dirs_cam: torch.Tensor  # (B, 3)
    blurry: torch.Tensor  # (B, 3)
    events: torch.Tensor  # (B, p-1)
    u: torch.Tensor  # (B, N) stratification draws


def sample_batch(data: TrainData, n_rays: int, n_samples: int, rng: np.random.Generator,
                 dtype=torch.float32) -> Batch:
    """Pixels uniformly over all views; one set of depth draws per pixel."""
    hw = data.blurry.shape[1]
    flat = rng.integers(0, data.n_views * hw, size=n_rays)
    views = torch.as_tensor(flat // hw)
    pixels = torch.as_tensor(flat % hw)
    return Batch(views, pixels, data.dirs_cam[pixels].to(dtype), data.blurry[views, pixels].to(dtype),
                 data.events[views, pixels].to(dtype), torch.as_tensor(rng.random((n_rays, n_samples)), dtype=dtype))


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    cfg: TrainConfig
    field: FieldParams
    poses: PoseModel
    coarse: FieldParams | None = None
    optimizer: torch.optim.Optimizer | None = None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    def parameters(self) -> dict[str, torch.Tensor]:
        out = {"field": self.field.flat}
        if self.coarse is not None:
            out["coarse"] = self.coarse.flat
        out.update(self.poses.named_parameters())
        return out


def init_state(cfg: TrainConfig, data: TrainData) -> TrainState:
    cfg.validate()
    enc = EncodingConfig(cfg.K_pos, cfg.K_dir, data.pos_scale)
    fld = init_field(enc, cfg.width, cfg.depth, seed=cfg.seed, dtype=cfg.torch_dtype)
    fld.flat.requires_grad_(True)
    coarse = None
    if cfg.hierarchical:
        coarse = init_field(enc, cfg.width, cfg.depth, seed=cfg.seed + 1, dtype=cfg.torch_dtype)
        coarse.flat.requires_grad_(True)
    trajs = init_poses(data.init_poses, cfg.p, data.exposures)
    poses = PoseModel(trajs, cfg.mode, cfg.pose_jitter, cfg.seed)
    groups = [{"params": [fld.flat] + ([coarse.flat] if coarse is not None else []), "lr": cfg.lr_field},
              {"params": poses.parameters(), "lr": cfg.lr_pose}]
    opt = torch.optim.Adam(groups, betas=cfg.adam_betas, eps=cfg.adam_eps)
    return TrainState(cfg, fld, poses, coarse, opt)


def _lr_factor(cfg: TrainConfig, it: int) -> float:
    return cfg.lr_decay ** (it / max(cfg.iters, 1))


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF samples from a piecewise-constant pdf over ``bins`` edges (``(..., N+1)``)."""
    w = weights + 1e-5
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, cdf.shape[-1] - 1)
    c0, c1 = torch.gather(cdf, -1, idx - 1), torch.gather(cdf, -1, idx)
    b0, b1 = torch.gather(bins, -1, idx - 1), torch.gather(bins, -1, idx)
    frac = (u - c0) / (c1 - c0).clamp_min(1e-12)
    return b0 + frac * (b1 - b0)


@dataclass
class Forward:
    rgb: torch.Tensor  # (B, p, 3) fine (or only) field
    rgb_coarse: torch.Tensor | None


def render_batch(state: TrainState, data: TrainData, batch: Batch, flat=None, coarse_flat=None,
                 pose_R=None, pose_t=None) -> Forward:
    """Render every batch pixel from all ``p`` poses of its view."""
    cfg = state.cfg
    dtype = cfg.torch_dtype
    if pose_R is None:
        pose_R, pose_t = state.poses.poses()
    R = pose_R[batch.views].to(dtype)  # (B, p, 3, 3)
    origins = pose_t[batch.views].to(dtype)  # (B, p, 3)
    dirs = (R @ batch.dirs_cam[:, None, :, None])[..., 0]
    K = data.K
    depths = stratified_depths(K.near, K.far, batch.u)[:, None, :]  # shared over poses
    if state.coarse is None:
        return Forward(render_rays(state.field, origins, dirs, depths, K.far, flat=flat), None)
    rgb_c = render_rays(state.coarse, origins, dirs, depths, K.far, flat=coarse_flat)
    with torch.no_grad():
        pts = origins[..., None, :] + depths[..., :, None] * dirs[..., None, :]
        from .render import eval_any
        _, sig = eval_any(state.coarse, pts, dirs[..., None, :].expand(pts.shape), coarse_flat)
        w = compositing_weights(sig, depths.expand(sig.shape), K.far).mean(1)  # pooled over poses
        delta = (K.far - K.near) / depths.shape[-1]
        edges = torch.cat([depths[:, 0] - 0.5 * delta, depths[:, 0, -1:] + 0.5 * delta], -1)
        edges = edges.clamp(K.near, K.far)
        g = torch.Generator().manual_seed(cfg.seed + state.iteration)
        u = torch.rand(w.shape[0], cfg.n_importance, generator=g, dtype=dtype)
        fine = sample_pdf(edges, w, u)
        fine_depths = torch.sort(torch.cat([depths[:, 0], fine], -1), -1).values[:, None, :]
    rgb_f = render_rays(state.field, origins, dirs, fine_depths, K.far, flat=flat)
    return Forward(rgb_f, rgb_c)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    blur: torch.Tensor
    event: torch.Tensor
    blur_coarse: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "blur", "event", "blur_coarse")}


def predicted_events(rgb: torch.Tensor, theta: float, quantize: bool = False) -> torch.Tensor:
    """``(B, p, 3)`` sharp colors -> ``(B, p-1)`` predicted event counts."""
    L = to_log(to_gray(rgb))  # (B, p)
    return predict_events(L.transpose(0, 1), theta, quantize).transpose(0, 1)


def total_loss(state: TrainState, fwd: Forward, batch: Batch) -> LossBreakdown:
    """``lam * L_event(fine) + L_blur(fine) [+ L_blur(coarse)]``."""
    cfg = state.cfg
    lam = cfg.event_weight
    blur = blur_loss(fwd.rgb.mean(1), batch.blurry)
    zero = torch.zeros((), dtype=blur.dtype)
    ev = zero
    if cfg.p >= 2 and (lam > 0 or cfg.mode == "noe"):
        # the no-event arm still reports the event residual, it just carries no weight
        ev = event_loss(predicted_events(fwd.rgb, cfg.theta, cfg.quantize_events), batch.events)
    coarse = blur_loss(fwd.rgb_coarse.mean(1), batch.blurry) if fwd.rgb_coarse is not None else zero
    total = blur + coarse + (lam * ev if lam > 0 else zero)
    return LossBreakdown(total, blur, ev, coarse)


def _diagnose(state: TrainState, fwd: Forward, batch: Batch) -> str:
    with torch.no_grad():
        bad = ~torch.isfinite(fwd.rgb).all(-1)  # (B, p)
        if bad.any():
            b, i = (int(x) for x in torch.nonzero(bad)[0])
            return f"non-finite render at view {int(batch.views[b])}, pixel {int(batch.pixels[b])}, pose {i}"
        pred = predicted_events(fwd.rgb, state.cfg.theta)
        if pred.numel():
            err = (pred - batch.events).abs()
            b, k = divmod(int(torch.argmax(err.nan_to_num(float("inf")))), err.shape[1])
            return (f"worst event residual at view {int(batch.views[b])}, pixel {int(batch.pixels[b])}, "
                    f"bin {k}: {float(err[b, k])}")
    return "no finite diagnostics available"


def pose_drift(state: TrainState, init: list[PoseSE3]) -> float:
    """Mean tangent norm between current poses and each view's initial pose."""
    R, t = state.poses.poses()
    R, t = R.detach().numpy(), t.detach().numpy()
    norms = [np.linalg.norm(se3_log(compose(PoseSE3(R[v, i], t[v, i]), inverse(P0))).as_vector())
             for v, P0 in enumerate(init) for i in range(R.shape[1])]
    return float(np.mean(norms))


def train_step(state: TrainState, data: TrainData, rng: np.random.Generator) -> dict:
    """One batch: render, backpropagate the total loss, Adam update, fold pose increments."""
    cfg = state.cfg
    batch = sample_batch(data, cfg.batch_rays, cfg.n_samples, rng, cfg.torch_dtype)
    holder = {}

    def closure():
        fwd = render_batch(state, data, batch)
        parts = total_loss(state, fwd, batch)
        holder["fwd"], holder["parts"] = fwd, parts
        if not torch.isfinite(parts.total):
            raise NumericalError(f"non-finite loss at iteration {state.iteration}: {_diagnose(state, fwd, batch)}")
        return parts.total

    params = state.parameters()
    _, grads = autodiff.record_and_backprop(closure, params)
    for name, p in params.items():
        p.grad = grads[name]
    factor = _lr_factor(cfg, state.iteration)
    state.optimizer.param_groups[0]["lr"] = cfg.lr_field * factor
    state.optimizer.param_groups[1]["lr"] = cfg.lr_pose * factor
    state.optimizer.step()
    state.poses.fold()
    state.iteration += 1
    return holder["parts"].as_floats()


def train(state: TrainState, data: TrainData, iters: int | None = None, log_path=None,
          progress: bool = False) -> TrainState:
    cfg = state.cfg
    iters = cfg.iters if iters is None else iters
    rng = np.random.default_rng(cfg.seed)
    # deterministic stream regardless of where a run resumes
    if state.iteration:
        rng = np.random.default_rng([cfg.seed, state.iteration])
    writer = None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["iter", "L_total", "L_blur", "L_event", "pose_drift"])
    try:
        for _ in range(iters):
            parts = train_step(state, data, rng)
            it = state.iteration
            if it % cfg.log_every == 0 or it == iters:
                drift = pose_drift(state, data.init_poses)
                state.history.append(dict(iter=it, drift=drift, **parts))
                if writer is not None:
                    writer.writerow([it, parts["total"], parts["blur"], parts["event"], drift])
                if progress:
                    logger.info("iter %d total %.5f blur %.5f event %.4f drift %.4f", it, parts["total"],
                                parts["blur"], parts["event"], drift)
    finally:
        if writer is not None:
            fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_field(out / "field.bin", state.field)
    if state.coarse is not None:
        io.save_field(out / "coarse.bin", state.coarse)
    trajs = state.poses.trajectories()
    meta = dict(config=state.cfg.to_dict(), config_hash=state.cfg.digest(), iteration=state.iteration,
                poses=state.poses.state_dict(),
                trajectories=[dict(timestamps=tr.timestamps.tolist(), poses=[P.as_row12() for P in tr.poses])
                              for tr in trajs])
    (out / "state.json").write_text(json.dumps(meta))
    torch.save(state.optimizer.state_dict(), out / "optimizer.pt")
    return out


def load_checkpoint(ckpt_dir, data: TrainData | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; without ``data`` only field and trajectories are restored."""
    ckpt = Path(ckpt_dir)
    meta = json.loads((ckpt / "state.json").read_text())
    cfg = TrainConfig.from_dict(meta["config"])
    fld = io.load_field(ckpt / "field.bin", dtype=cfg.torch_dtype)
    coarse = io.load_field(ckpt / "coarse.bin", dtype=cfg.torch_dtype) if (ckpt / "coarse.bin").exists() else None
    trajs = [Trajectory(tr["timestamps"], [PoseSE3.from_row12(r) for r in tr["poses"]])
             for tr in meta["trajectories"]]
    poses = PoseModel(trajs, cfg.mode, 0.0, cfg.seed)
    poses.load_state_dict(meta["poses"])
    fld.flat.requires_grad_(True)
    state = TrainState(cfg, fld, poses, coarse, None, meta["iteration"])
    if data is not None:
        groups = [{"params": [fld.flat] + ([coarse.flat] if coarse is not None else []), "lr": cfg.lr_field},
                  {"params": poses.parameters(), "lr": cfg.lr_pose}]
        state.optimizer = torch.optim.Adam(groups, betas=cfg.adam_betas, eps=cfg.adam_eps)
        if (ckpt / "optimizer.pt").exists():
            state.optimizer.load_state_dict(torch.load(ckpt / "optimizer.pt"))
    return state


def checkpoint_trajectories(ckpt_dir) -> list[Trajectory]:
    meta = json.loads((Path(ckpt_dir) / "state.json").read_text())
    return [Trajectory(tr["timestamps"], [PoseSE3.from_row12(r) for r in tr["poses"]])
            for tr in meta["trajectories"]]
