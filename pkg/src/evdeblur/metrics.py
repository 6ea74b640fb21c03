"""Image quality (PSNR, SSIM) and trajectory accuracy (ATE) metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .lie import PoseSE3, Trajectory

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_terms(mu_a, mu_b, var_a, var_b, cov):
    lum = (2 * mu_a * mu_b + SSIM_C1) / (mu_a**2 + mu_b**2 + SSIM_C1)
    cs = (2 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2)
    return lum * cs


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         return_flag: bool = False):
    """Mean SSIM over valid 11x11 Gaussian windows of the channel-mean images.

    Images smaller than the window fall back to one global window (and, with
    ``return_flag``, report it).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    fallback = min(a.shape) < window
    if fallback:
        mu_a, mu_b = a.mean(), b.mean()
        val = float(_ssim_terms(mu_a, mu_b, a.var(), b.var(), ((a - mu_a) * (b - mu_b)).mean()))
    else:
        g = gaussian_window(window, sigma)

        def filt(x):
            y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
            r = window // 2
            return y[r:y.shape[0] - r, r:y.shape[1] - r]

        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a**2
        var_b = filt(b * b) - mu_b**2
        cov = filt(a * b) - mu_a * mu_b
        val = float(_ssim_terms(mu_a, mu_b, var_a, var_b, cov).mean())
    return (val, fallback) if return_flag else val


@dataclass
class AteReport:
    trans_rmse: float
    trans_std: float
    rot_rmse: float  # radians
    alignment: PoseSE3  # maps estimated positions onto the truth
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dict(trans_rmse=self.trans_rmse, trans_std=self.trans_std, rot_rmse=self.rot_rmse,
                    alignment=self.alignment.as_row12(), degenerate=self.degenerate)


def _rank_deficient(centered: np.ndarray, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] < tol or s[1] <= tol * max(s[0], 1.0)


def umeyama_rigid(est: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Rotation and translation minimizing ``sum |R est_i + t - truth_i|^2`` (no scale).

    Collinear or coincident point sets leave the rotation undetermined; the
    alignment then falls back to matching centroids and the flag is set.
    """
    mu_e, mu_t = est.mean(0), truth.mean(0)
    E, T = est - mu_e, truth - mu_t
    if len(est) < 3 or _rank_deficient(E) or _rank_deficient(T):
        return np.eye(3), mu_t - mu_e, True
    U, _, Vt = np.linalg.svd(T.T @ E)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_e, False


def rotation_angle(R: np.ndarray) -> float:
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def ate(estimated: Trajectory, truth: Trajectory) -> AteReport:
    """Absolute trajectory error after rigid alignment of camera positions."""
    if len(estimated) != len(truth) or len(estimated) < 2:
        raise ValueError("ATE needs two trajectories of equal length >= 2")
    if not np.allclose(estimated.timestamps, truth.timestamps, rtol=0, atol=1e-9):
        raise ValueError("ATE trajectories must share timestamps")
    est, tru = estimated.positions(), truth.positions()
    R, t, degenerate = umeyama_rigid(est, tru)
    err = np.linalg.norm(est @ R.T + t - tru, axis=1)
    rot_err = np.array([rotation_angle(Q.T @ (R @ P)) for P, Q in
                        zip(estimated.rotations(), truth.rotations())])
    return AteReport(float(np.sqrt(np.mean(err**2))), float(np.std(err)),
                     float(np.sqrt(np.mean(rot_err**2))), PoseSE3(R, t), degenerate)
