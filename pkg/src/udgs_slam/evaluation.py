# src/udgs_slam/evaluation.py
"""
Trajectory and rendering metrics: ATE-RMSE after closed-form alignment, PSNR and SSIM.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from .dataio import Trajectory, associate
from .errors import DegenerateConfiguration, IoFailure, ShapeMismatch, TooFewPoses, TooSmall
from .schemas import MetricsRow

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# --- Trajectory alignment ---

@dataclass
class Alignment:
    """gt_i ~ scale * rotation @ est_i + translation"""
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    residuals: np.ndarray
    degenerate: bool = False

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.residuals ** 2)))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def matched_positions(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> Tuple[np.ndarray, np.ndarray]:
    """Camera positions of the timestamp-associated pose pairs."""
    pairs = associate(est.timestamps, gt.timestamps, max_dt)
    if not pairs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    est_index, gt_index = (np.array(index) for index in zip(*pairs))
    return est.translations[est_index], gt.translations[gt_index]


def align_points(est_points: np.ndarray, gt_points: np.ndarray, with_scale: bool = False,
                 strict: bool = False) -> Alignment:
    """
    Least-squares rigid (or similarity) transform taking est points onto gt points.
    Collinear estimates leave the rotation unobservable; alignment then falls back
    to translation only and the result is flagged degenerate, or with `strict`
    the configuration is raised instead.

    Raises:
        TooFewPoses: fewer than 3 pairs.
        DegenerateConfiguration: collinear or coincident estimates when strict.
    """
    X = np.asarray(est_points, dtype=float).reshape(-1, 3)
    Y = np.asarray(gt_points, dtype=float).reshape(-1, 3)
    n = len(X)
    if n < 3:
        raise TooFewPoses(f"Need at least 3 associated poses for alignment, got {n}")
    mean_x, mean_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mean_x, Y - mean_y

    spread = np.linalg.svd(Xc, compute_uv=False)
    if spread[0] == 0 or spread[1] <= 1e-10 * spread[0]:
        if strict:
            raise DegenerateConfiguration(f"Estimated positions of {n} poses are collinear; rotation is unobservable")
        logger.warning("Estimated positions are collinear; falling back to translation-only alignment.")
        rotation, scale = np.eye(3), 1.0
        degenerate = True
    else:
        U, D, Vt = np.linalg.svd(Yc.T @ Xc / n)
        S = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1.0
        rotation = U @ S @ Vt
        scale = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(Xc ** 2, axis=1))) if with_scale else 1.0
        degenerate = False
    translation = mean_y - scale * rotation @ mean_x
    residuals = np.linalg.norm(Y - (scale * X @ rotation.T + translation), axis=1)
    return Alignment(rotation, translation, scale, residuals, degenerate)


def align_umeyama(est: Trajectory, gt: Trajectory, with_scale: bool = False, max_dt: float = 0.02,
                  strict: bool = False) -> Alignment:
    est_points, gt_points = matched_positions(est, gt, max_dt)
    return align_points(est_points, gt_points, with_scale, strict)


def ate_rmse(est: Trajectory, gt: Trajectory, with_scale: bool = False, max_dt: float = 0.02) -> float:
    """Root-mean-square position error after alignment (meters)."""
    return align_umeyama(est, gt, with_scale, max_dt).rmse


# --- Image metrics ---

def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) over all channels for images in [0, 1]; inf when identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    def blur(img):
        return ndimage.gaussian_filter(img, sigma=SSIM_SIGMA, truncate=3.5, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    sigma_xx = blur(x * x) - mu_x * mu_x
    sigma_yy = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_xx + sigma_yy + SSIM_C2)
    pad = SSIM_WINDOW // 2
    # only windows lying fully inside the image
    return (numerator / denominator)[pad:-pad, pad:-pad]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2,
    per channel then averaged.

    Raises:
        ShapeMismatch: shapes differ.
        TooSmall: either side is below the window size.
    """
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    values = [float(_ssim_channel(a[:, :, c], b[:, :, c]).mean()) for c in range(a.shape[2])]
    return float(np.mean(values))


# --- Reports ---

def metrics_table(rows: Iterable[MetricsRow]) -> pd.DataFrame:
    columns = list(MetricsRow.model_fields)
    return pd.DataFrame([row.model_dump() for row in rows], columns=columns)


def write_metrics(rows: Iterable[MetricsRow], path: Union[str, Path]) -> None:
    try:
        metrics_table(rows).to_csv(path, index=False, float_format="%.6f")
    except OSError as exc:
        raise IoFailure(f"Cannot write metrics {path}: {exc}")
