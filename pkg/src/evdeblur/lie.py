"""Rigid-body geometry on SE(3).

Poses map camera coordinates to world coordinates (``x_world = R @ x_cam + t``)
and the camera looks down its local -z axis. Tangent vectors are ordered
``(omega, v)``: rotation first, translation second.

The numpy functions here operate on single poses. ``exp_torch`` is the batched,
differentiable counterpart used when poses are optimized.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

SMALL_ANGLE = 1e-8
# (theta - sin theta) / theta^3 cancels badly well above SMALL_ANGLE
SERIES_ANGLE = 1e-3
NEAR_PI = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ x == cross(w, x)``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "PoseSE3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_row12(cls, row: Sequence[float]) -> "PoseSE3":
        """Inverse of :meth:`as_row12` (row-major 3x4 ``[R|t]``)."""
        return cls.from_matrix(np.asarray(row, dtype=np.float64).reshape(3, 4))

    def as_row12(self) -> list[float]:
        return [float(x) for x in self.matrix3x4().ravel()]

    def matrix3x4(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :4] = self.matrix3x4()
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def orthonormality_error(self) -> float:
        """Largest deviation from the rotation invariants (R R^T = I, det R = 1)."""
        R = self.rotation
        return max(float(np.abs(R @ R.T - np.eye(3)).max()), abs(float(np.linalg.det(R)) - 1.0))


@dataclass(frozen=True)
class TangentSE3:
    omega: np.ndarray
    v: np.ndarray
    degenerate: bool = False  # set by log() when the rotation angle is ~pi

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))

    @classmethod
    def from_vector(cls, xi: Sequence[float]) -> "TangentSE3":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


def _coefficients(theta: float) -> tuple[float, float, float]:
    if theta < SMALL_ANGLE:
        A = 1.0 - theta**2 / 6.0
        B = 0.5 - theta**2 / 24.0
    else:
        A = np.sin(theta) / theta
        B = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    if theta < SERIES_ANGLE:
        C = 1.0 / 6.0 - theta**2 / 120.0 + theta**4 / 5040.0
    else:
        C = (theta - np.sin(theta)) / theta**3
    return A, B, C


def exp(xi: TangentSE3 | Sequence[float]) -> PoseSE3:
    """SE(3) exponential: Rodrigues rotation and the left-Jacobian translation."""
    if not isinstance(xi, TangentSE3):
        xi = TangentSE3.from_vector(xi)
    theta = float(np.linalg.norm(xi.omega))
    A, B, C = _coefficients(theta)
    W = hat(xi.omega)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return PoseSE3(R, V @ xi.v)


def _log_rotation(R: np.ndarray) -> tuple[np.ndarray, bool]:
    s_vec = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(s_vec))
    c = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    theta = float(np.arctan2(s, c))
    if theta < SMALL_ANGLE:
        return s_vec, False
    if np.pi - theta < NEAR_PI:
        # sin(theta) ~ 0: recover the axis from the symmetric part, R + I = 2 n n^T
        S = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(S)))
        n = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
        n /= np.linalg.norm(n)
        if s > 0 and float(n @ s_vec) < 0:
            n = -n
        return theta * n, True
    return (theta / s) * s_vec, False


def log(P: PoseSE3) -> TangentSE3:
    """Inverse of :func:`exp` for rotation angles in [0, pi)."""
    omega, degenerate = _log_rotation(P.rotation)
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SERIES_ANGLE:
        D = 1.0 / 12.0 + theta**2 / 720.0
    else:
        A, B, _ = _coefficients(theta)
        D = (1.0 - A / (2.0 * B)) / theta**2
    V_inv = np.eye(3) - 0.5 * W + D * (W @ W)
    return TangentSE3(omega, V_inv @ P.translation, degenerate)


def compose(A: PoseSE3, B: PoseSE3) -> PoseSE3:
    return PoseSE3(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def inverse(P: PoseSE3) -> PoseSE3:
    Rt = P.rotation.T
    return PoseSE3(Rt, -Rt @ P.translation)


def catmull_rom_weights(u: float) -> np.ndarray:
    """Uniform Catmull-Rom blending weights for control points (k-1, k, k+1, k+2)."""
    u2, u3 = u * u, u * u * u
    return 0.5 * np.array([
        -u + 2 * u2 - u3,
        2 - 5 * u2 + 3 * u3,
        u + 4 * u2 - 3 * u3,
        -u2 + u3,
    ])


def interpolate(start: PoseSE3, end: PoseSE3, u: float, mode: str = "linear",
                neighbors: tuple[PoseSE3, PoseSE3] | None = None) -> PoseSE3:
    """Pose at fraction ``u`` of the way from ``start`` to ``end``.

    ``linear`` follows the left-invariant geodesic ``exp(u log(end start^-1)) start``.
    ``cubic`` blends the four control poses ``(neighbors[0], start, end, neighbors[1])``
    with uniform Catmull-Rom weights applied to their logs relative to ``start``.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"interpolation fraction must lie in [0, 1], got {u}")
    start_inv = inverse(start)
    if mode == "linear":
        xi = log(compose(end, start_inv)).as_vector()
        return compose(exp(u * xi), start)
    if mode == "cubic":
        if neighbors is None:
            raise ValueError("cubic interpolation needs the two neighboring control poses")
        before, after = neighbors
        logs = np.stack([
            log(compose(before, start_inv)).as_vector(),
            np.zeros(6),
            log(compose(end, start_inv)).as_vector(),
            log(compose(after, start_inv)).as_vector(),
        ])
        return compose(exp(catmull_rom_weights(u) @ logs), start)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def even_timestamps(t_start: float, t_end: float, p: int) -> np.ndarray:
    """``p`` evenly spaced times over the exposure; a single pose sits at mid-exposure."""
    if p < 1:
        raise ValueError("need at least one timestamp")
    if p == 1:
        return np.array([0.5 * (t_start + t_end)])
    return np.linspace(t_start, t_end, p)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[PoseSE3] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([P.translation for P in self.poses])

    def rotations(self) -> np.ndarray:
        return np.stack([P.rotation for P in self.poses])

    def pose_at(self, t: float) -> PoseSE3:
        """Geodesic interpolation between the bracketing samples (clamped at the ends)."""
        ts = self.timestamps
        if t <= ts[0]:
            return self.poses[0]
        if t >= ts[-1]:
            return self.poses[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        u = (t - ts[k]) / (ts[k + 1] - ts[k])
        return interpolate(self.poses[k], self.poses[k + 1], float(np.clip(u, 0.0, 1.0)))

    def resample(self, timestamps: Sequence[float]) -> "Trajectory":
        return Trajectory(np.asarray(timestamps), [self.pose_at(float(t)) for t in timestamps])


# ---------------------------------------------------------------------------
# batched torch versions (differentiable)


def hat_torch(w: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(w[..., 0])
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)


def exp_torch(xi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched SE(3) exponential of ``(..., 6)`` tangents -> ``(R (..., 3, 3), t (..., 3))``.

    Gradients are finite everywhere, including at ``xi = 0``.
    """
    omega, v = xi[..., :3], xi[..., 3:]
    theta2 = (omega * omega).sum(-1)
    tiny = theta2 < SMALL_ANGLE**2
    series = theta2 < SERIES_ANGLE**2
    theta = torch.sqrt(torch.where(tiny, torch.ones_like(theta2), theta2))
    A = torch.where(tiny, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    B = torch.where(tiny, 0.5 - theta2 / 24.0, 2.0 * torch.sin(0.5 * theta) ** 2 / (theta * theta))
    theta_c = torch.where(series, torch.ones_like(theta), theta)
    C = torch.where(series, 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
                    (theta_c - torch.sin(theta_c)) / theta_c**3)
    W = hat_torch(omega)
    W2 = W @ W
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(W.shape)
    R = eye + A[..., None, None] * W + B[..., None, None] * W2
    V = eye + B[..., None, None] * W + C[..., None, None] * W2
    return R, (V @ v[..., None])[..., 0]
