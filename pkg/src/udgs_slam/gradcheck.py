# src/udgs_slam/gradcheck.py
"""
Central finite-difference checks of render_backward. The scalar under test is
sum(grad_color * C) + sum(grad_depth * D) for fixed random upstream gradients.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .constants import ParameterGroup
from .gaussian_map import GaussianMap, logit
from .geometry import CameraIntrinsics, SE3Pose, se3_exp, se3_retract
from .rasterizer import render, render_backward
from .schemas import RenderConfig

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool


def exact_config(**overrides) -> RenderConfig:
    """Render settings without early termination, so the rendered function is smooth."""
    return RenderConfig(**{"t_stop": 0.0, **overrides})


def scalarized_render(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, grad_color: np.ndarray,
                      grad_depth: np.ndarray, cfg: RenderConfig) -> float:
    out = render(gmap, pose, K, cfg)
    return float(np.sum(grad_color * out.color_image) + np.sum(grad_depth * out.depth_image))


def numeric_group_gradient(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, grad_color: np.ndarray,
                           grad_depth: np.ndarray, cfg: RenderConfig, group: str, step: float = 1e-6) -> np.ndarray:
    values = gmap.parameter_groups()[group]
    grad = np.zeros(len(values))
    for k in range(len(values)):
        original = values[k]
        values[k] = original + step
        plus = scalarized_render(gmap, pose, K, grad_color, grad_depth, cfg)
        values[k] = original - step
        minus = scalarized_render(gmap, pose, K, grad_color, grad_depth, cfg)
        values[k] = original
        grad[k] = (plus - minus) / (2.0 * step)
    return grad


def numeric_pose_gradient(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, grad_color: np.ndarray,
                          grad_depth: np.ndarray, cfg: RenderConfig, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros(6)
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = step
        plus = scalarized_render(gmap, se3_retract(pose, xi), K, grad_color, grad_depth, cfg)
        minus = scalarized_render(gmap, se3_retract(pose, -xi), K, grad_color, grad_depth, cfg)
        grad[k] = (plus - minus) / (2.0 * step)
    return grad


def compare(name: str, analytic: np.ndarray, numeric: np.ndarray,
            atol: float = 1e-6, rtol: float = 1e-3) -> GradCheckReport:
    """Passes when |a - n| <= atol + rtol |n| elementwise."""
    error = np.abs(np.asarray(analytic) - np.asarray(numeric))
    rel = error / np.maximum(np.abs(numeric), atol)
    passed = bool(np.all(error <= atol + rtol * np.abs(numeric)))
    return GradCheckReport(name, float(error.max(initial=0.0)), float(rel.max(initial=0.0)), passed)


def random_scene(rng: np.random.Generator, n_splats: int, K: CameraIntrinsics) -> Tuple[GaussianMap, SE3Pose]:
    """Splats spread across the view of a camera near the identity pose."""
    z = rng.uniform(2.0, 4.0, size=n_splats)
    u = rng.uniform(0.1 * K.width, 0.9 * K.width, size=n_splats)
    v = rng.uniform(0.1 * K.height, 0.9 * K.height, size=n_splats)
    mu = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
    log_scale = np.log(rng.uniform(0.1, 0.4, size=(n_splats, 3)))
    quats = rng.normal(size=(n_splats, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    colors = rng.uniform(0.0, 1.0, size=(n_splats, 3))
    opacities = rng.uniform(0.3, 0.9, size=n_splats)
    gmap = GaussianMap()
    gmap.add(mu, log_scale, quats, colors, logit(opacities))
    pose = se3_exp(np.concatenate([rng.normal(0.0, 0.02, 3), rng.normal(0.0, 0.02, 3)]))
    return gmap, pose


def check_gradients(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, rng: np.random.Generator,
                    cfg: Optional[RenderConfig] = None, atol: float = 1e-6, rtol: float = 1e-3) -> List[GradCheckReport]:
    """Compare every parameter group and the pose tangent against central differences."""
    cfg = cfg or exact_config()
    grad_color = rng.normal(size=(K.height, K.width, 3))
    grad_depth = rng.normal(size=(K.height, K.width))
    bundle = render_backward(gmap, pose, K, grad_color, grad_depth, cfg)
    reports = []
    for group in ParameterGroup:
        numeric = numeric_group_gradient(gmap, pose, K, grad_color, grad_depth, cfg, group.value)
        reports.append(compare(group.value, bundle.groups()[group.value], numeric, atol, rtol))
    numeric_pose = numeric_pose_gradient(gmap, pose, K, grad_color, grad_depth, cfg)
    reports.append(compare("pose", bundle.d_pose, numeric_pose, atol, rtol))
    for report in reports:
        if not report.passed:
            logger.warning(f"Gradient mismatch in {report.name}: max abs error {report.max_abs_error:.3g}")
    return reports
