"""Radiance field: sinusoidal encoding plus a small MLP returning color and density.

All weights live in one flat tensor so that checkpoints, optimizers and
gradient checks see a single parameter vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError


@dataclass(frozen=True)
class EncodingConfig:
    K_pos: int = 6
    K_dir: int = 2
    # world positions are multiplied by this before encoding; the encoding has
    # period 2 so the sampled region must map inside (-1, 1)
    pos_scale: float = 1.0

    def __post_init__(self):
        if self.K_pos < 0 or self.K_dir < 0:
            raise ValueError("encoding frequency counts must be non-negative")

    @property
    def pos_dim(self) -> int:
        return 3 * 2 * (self.K_pos + 1)

    @property
    def dir_dim(self) -> int:
        return 3 * 2 * (self.K_dir + 1)


def encode(x, K: int):
    """Sinusoidal encoding ``(sin 2^k pi x, cos 2^k pi x)`` for k = 0..K.

    Works on numpy arrays and torch tensors; the last axis holds the input
    components and the output is ordered component-major
    ``(sin k=0, cos k=0, sin k=1, cos k=1, ...)`` per component.
    """
    if isinstance(x, torch.Tensor):
        freqs = (2.0 ** torch.arange(K + 1, dtype=x.dtype, device=x.device)) * math.pi
        arg = x[..., :, None] * freqs
        out = torch.stack([torch.sin(arg), torch.cos(arg)], -1)
        return out.reshape(*x.shape[:-1], -1)
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    arg = x[..., :, None] * (2.0 ** np.arange(K + 1)) * np.pi
    out = np.stack([np.sin(arg), np.cos(arg)], -1).reshape(*x.shape[:-1], -1)
    return out if not scalar else out.reshape(-1)


@dataclass
class FieldParams:
    """Layer shapes plus the flat parameter vector they index into.

    ``shapes`` lists ``(fan_in, fan_out)`` per affine layer in evaluation
    order: the trunk layers, the density head, the color hidden layer and the
    color output layer. Each layer stores its ``(fan_out, fan_in)`` weight
    row-major followed by its bias.
    """

    shapes: list[tuple[int, int]]
    flat: torch.Tensor
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        expected = sum(i * o + o for i, o in self.shapes)
        if self.flat.ndim != 1 or self.flat.numel() != expected:
            raise ValueError(f"flat parameter vector has {self.flat.numel()} entries, layers need {expected}")

    @property
    def n_trunk(self) -> int:
        return len(self.shapes) - 3

    def layers(self, flat: torch.Tensor | None = None):
        flat = self.flat if flat is None else flat
        out, k = [], 0
        for fan_in, fan_out in self.shapes:
            W = flat[k:k + fan_in * fan_out].view(fan_out, fan_in)
            k += fan_in * fan_out
            b = flat[k:k + fan_out]
            k += fan_out
            out.append((W, b))
        return out

    def numpy(self) -> np.ndarray:
        return self.flat.detach().cpu().numpy().astype(np.float64)

    def with_flat(self, flat: torch.Tensor) -> "FieldParams":
        return FieldParams(list(self.shapes), flat, self.encoding)


def layer_shapes(encoding: EncodingConfig, width: int = 64, depth: int = 4,
                 color_width: int = 32) -> list[tuple[int, int]]:
    shapes = [(encoding.pos_dim, width)] + [(width, width)] * (depth - 1)
    shapes += [(width, 1), (width + encoding.dir_dim, color_width), (color_width, 3)]
    return shapes


def init_field(encoding: EncodingConfig | None = None, width: int = 64, depth: int = 4,
               color_width: int = 32, seed: int = 0, dtype=torch.float32) -> FieldParams:
    """He-uniform weights (fan-in scaling), zero biases, from a fixed seed."""
    encoding = encoding or EncodingConfig()
    shapes = layer_shapes(encoding, width, depth, color_width)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in shapes:
        bound = math.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    flat = torch.tensor(np.concatenate(chunks), dtype=dtype)
    return FieldParams(shapes, flat, encoding)


def zeros_field(encoding: EncodingConfig | None = None, dtype=torch.float64, **kw) -> FieldParams:
    encoding = encoding or EncodingConfig()
    shapes = layer_shapes(encoding, **kw)
    return FieldParams(shapes, torch.zeros(sum(i * o + o for i, o in shapes), dtype=dtype), encoding)


def _check(h: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(h).all():
        raise NumericalError(f"non-finite activation in field layer '{name}'")
    return h


def field_forward(params: FieldParams, positions: torch.Tensor, directions: torch.Tensor,
                  flat: torch.Tensor | None = None, check: bool = True):
    """Evaluate the field on ``(..., 3)`` positions and unit directions.

    Returns ``(rgb (..., 3) in [0, 1], sigma (...) >= 0)``. ``flat`` overrides
    the stored parameter vector (used when differentiating).
    """
    enc = params.encoding
    layers = params.layers(flat)
    h = encode(positions * enc.pos_scale, enc.K_pos)
    for i, (W, b) in enumerate(layers[:params.n_trunk]):
        h = torch.relu(F.linear(h, W, b))
        if check:
            _check(h, f"trunk{i}")
    Wd, bd = layers[params.n_trunk]
    sigma = F.softplus(F.linear(h, Wd, bd))[..., 0]
    d_enc = encode(directions, enc.K_dir).expand(*h.shape[:-1], -1)
    Wc, bc = layers[params.n_trunk + 1]
    hc = torch.relu(F.linear(torch.cat([h, d_enc], -1), Wc, bc))
    Wo, bo = layers[params.n_trunk + 2]
    rgb = torch.sigmoid(F.linear(hc, Wo, bo))
    if check:
        _check(sigma, "density")
        _check(rgb, "color")
    return rgb, sigma


@dataclass(frozen=True)
class PointSample:
    position: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("sample direction must be a unit vector")


def eval_field(params: FieldParams, s: PointSample) -> tuple[np.ndarray, float]:
    """Color and density of a single point sample."""
    dtype = params.flat.dtype
    with torch.no_grad():
        rgb, sigma = field_forward(params, torch.as_tensor(np.asarray(s.position), dtype=dtype)[None],
                                   torch.as_tensor(np.asarray(s.direction), dtype=dtype)[None])
    return rgb[0].double().numpy(), float(sigma[0])
