"""Pinhole rays, stratified depth sampling and volume rendering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch

from .field import FieldParams, field_forward
from .lie import PoseSE3

LOG_EPS = 1e-3

FieldFn = Callable[[torch.Tensor, torch.Tensor], tuple]
FieldLike = Union[FieldParams, FieldFn]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have at least one pixel")

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                    height=self.height, near=self.near, far=self.far)

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), float(d["near"]), float(d["far"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


def camera_directions(K: Intrinsics, pixels: np.ndarray | None = None) -> np.ndarray:
    """Unit camera-frame ray directions through pixel centers.

    ``pixels`` is ``(n, 2)`` integer ``(x, y)``; by default every pixel of the
    image in row-major order. The image y axis points down, camera y up.
    """
    if pixels is None:
        ys, xs = np.mgrid[0:K.height, 0:K.width]
        pixels = np.stack([xs.ravel(), ys.ravel()], -1)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.stack([
        (pixels[:, 0] + 0.5 - K.cx) / K.fx,
        -(pixels[:, 1] + 0.5 - K.cy) / K.fy,
        -np.ones(len(pixels)),
    ], -1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(K: Intrinsics, pose: PoseSE3, pixel: tuple[int, int]) -> Ray:
    x, y = pixel
    if not (0 <= x < K.width and 0 <= y < K.height):
        raise ValueError(f"pixel {pixel} outside a {K.width}x{K.height} image")
    d = pose.rotation @ camera_directions(K, np.array([[x, y]]))[0]
    return Ray(pose.translation.copy(), d / np.linalg.norm(d), (int(x), int(y)))


def stratified_depths(near: float, far: float, u):
    """Depths ``near + (i + u_i) * delta`` with one draw ``u_i`` in [0, 1) per bin.

    ``u`` has shape ``(..., N)``; numpy or torch in, same kind out.
    """
    n = u.shape[-1]
    delta = (far - near) / n
    if isinstance(u, torch.Tensor):
        idx = torch.arange(n, dtype=u.dtype, device=u.device)
    else:
        idx = np.arange(n, dtype=np.float64)
    return near + (idx + u) * delta


def stratified_samples(ray_or_near, N: int, rng: np.random.Generator | None = None,
                       far: float | None = None) -> np.ndarray:
    """N stratified depths between near and far.

    Accepts ``(near, far)`` or an :class:`Intrinsics`. ``rng=None`` puts each
    sample at its bin midpoint.
    """
    if N < 1:
        raise ValueError("need at least one sample per ray")
    if isinstance(ray_or_near, Intrinsics):
        near, far = ray_or_near.near, ray_or_near.far
    else:
        near = ray_or_near
    u = np.full(N, 0.5) if rng is None else rng.random(N)
    return stratified_depths(near, far, u)


def compositing_weights(sigmas: torch.Tensor, depths: torch.Tensor, far: float) -> torch.Tensor:
    """Per-sample weights ``T_i (1 - exp(-sigma_i delta_i))``; last interval ends at ``far``."""
    far_t = torch.full_like(depths[..., :1], far)
    delta = torch.cat([depths[..., 1:], far_t], -1) - depths
    tau = sigmas * delta
    # exclusive cumulative optical depth
    trans = torch.exp(-(torch.cumsum(tau, -1) - tau))
    return trans * -torch.expm1(-tau)


def volume_render(colors, sigmas, depths, far: float):
    """Composite ``(..., N, 3)`` colors with ``(..., N)`` densities along a ray.

    The last sample's interval runs to the far bound.
    """
    as_numpy = not isinstance(colors, torch.Tensor)
    colors, sigmas, depths = (torch.as_tensor(np.asarray(a, dtype=np.float64)) if as_numpy else a
                              for a in (colors, sigmas, depths))
    if (sigmas < 0).any():
        raise ValueError("densities must be non-negative")
    w = compositing_weights(sigmas, depths, far)
    rgb = (w[..., None] * colors).sum(-2)
    return rgb.numpy() if as_numpy else rgb


def eval_any(field: FieldLike, positions: torch.Tensor, directions: torch.Tensor, flat=None):
    if isinstance(field, FieldParams):
        return field_forward(field, positions, directions, flat=flat)
    return field(positions, directions)


def render_rays(field: FieldLike, origins: torch.Tensor, directions: torch.Tensor,
                depths: torch.Tensor, far: float, flat=None) -> torch.Tensor:
    """Render rays with leading shape ``S``; ``depths`` broadcasts as ``(..., N)``.

    ``origins``/``directions`` are ``(*S, 3)``; returns ``(*S, 3)``.
    """
    pts = origins[..., None, :] + depths[..., :, None] * directions[..., None, :]
    dirs = directions[..., None, :].expand(pts.shape)
    rgb, sigma = eval_any(field, pts, dirs, flat)
    depths = depths.expand(sigma.shape)
    w = compositing_weights(sigma, depths, far)
    return (w[..., None] * rgb).sum(-2)


def _dtype_of(field: FieldLike):
    return field.flat.dtype if isinstance(field, FieldParams) else torch.float64


def render_pixel(field: FieldLike, K: Intrinsics, pose: PoseSE3, pixel: tuple[int, int], N: int,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    ray = pixel_ray(K, pose, pixel)
    dtype = _dtype_of(field)
    depths = torch.as_tensor(stratified_samples(K, N, rng), dtype=dtype)
    with torch.no_grad():
        rgb = render_rays(field, torch.as_tensor(ray.origin, dtype=dtype),
                          torch.as_tensor(ray.direction, dtype=dtype), depths, K.far)
    return rgb.double().numpy()


def render_image(field: FieldLike, K: Intrinsics, pose: PoseSE3, N: int,
                 rng: np.random.Generator | None = None, chunk: int = 1024) -> np.ndarray:
    """Render a full ``(H, W, 3)`` image; ``rng=None`` samples bin midpoints."""
    dtype = _dtype_of(field)
    dirs_cam = camera_directions(K)
    dirs = torch.as_tensor(dirs_cam @ pose.rotation.T, dtype=dtype)
    origin = torch.as_tensor(pose.translation, dtype=dtype)
    n_pix = len(dirs_cam)
    u = np.full((n_pix, N), 0.5) if rng is None else rng.random((n_pix, N))
    depths = stratified_depths(K.near, K.far, torch.as_tensor(u, dtype=dtype))
    out = []
    with torch.no_grad():
        for s in range(0, n_pix, chunk):
            d = dirs[s:s + chunk]
            out.append(render_rays(field, origin.expand(d.shape), d, depths[s:s + chunk], K.far))
    return torch.cat(out).double().numpy().reshape(K.height, K.width, 3)


def to_gray(rgb):
    """Channel mean (not luma weighting)."""
    return rgb.mean(-1) if isinstance(rgb, torch.Tensor) else np.asarray(rgb, dtype=np.float64).mean(-1)


def to_log(gray):
    if isinstance(gray, torch.Tensor):
        return torch.log(gray + LOG_EPS)
    return np.log(np.asarray(gray, dtype=np.float64) + LOG_EPS)
