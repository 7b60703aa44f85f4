# src/udgs_slam/synth.py
"""
Synthetic scenes for closed-loop testing: seeded splat scenes, circular camera
paths, RGB-D frames rendered from them, and heavy-tailed depth corruption.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .depth_filter import DepthMap
from .dataio import Trajectory, write_depth, write_rgb, write_trajectory_tum
from .gaussian_map import GaussianMap, logit
from .geometry import CameraIntrinsics, SE3Pose
from .rasterizer import render
from .schemas import RenderConfig, SceneSpec
from .slam import Frame

logger = logging.getLogger(__name__)

FRAME_RATE = 30.0
# Synthetic depth is only trusted where the render is mostly opaque
DEPTH_ALPHA_MIN = 0.5


def make_scene(spec: SceneSpec) -> GaussianMap:
    """
    Seeded random scene: centers uniform in a cube of edge `extent` around the
    origin, random orientations, colors in [0, 1] and opacities in [0.3, 0.95].
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_splats
    half = 0.5 * spec.extent
    mu_w = rng.uniform(-half, half, size=(n, 3))
    scales = rng.uniform(0.04, 0.12, size=(n, 3)) * spec.extent
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    opacities = rng.uniform(0.3, 0.95, size=n)
    gmap = GaussianMap()
    gmap.add(mu_w, np.log(scales), quats, colors, logit(opacities))
    return gmap


def look_at_pose(center: np.ndarray, target: np.ndarray) -> SE3Pose:
    """World-to-camera pose at `center` with the optical axis through `target` (world y down)."""
    center = np.asarray(center, dtype=float)
    forward = np.asarray(target, dtype=float) - center
    forward /= np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    up_down = np.cross(forward, right)
    R_cw = np.stack([right, up_down, forward])
    return SE3Pose(R_cw, -R_cw @ center)


def make_orbit(radius: float, n_frames: int, look_at: Sequence[float] = (0.0, 0.0, 0.0),
               arc_radians: float = 2.0 * np.pi) -> List[SE3Pose]:
    """
    Equally spaced cameras on a horizontal circle around `look_at`, all facing it.
    Frame i sits at heading arc_radians * i / n_frames, so a full circle gives
    consecutive baselines of 2 r sin(pi / n).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    target = np.asarray(look_at, dtype=float)
    poses = []
    for i in range(n_frames):
        heading = arc_radians * i / n_frames
        center = target + radius * np.array([np.sin(heading), 0.0, -np.cos(heading)])
        poses.append(look_at_pose(center, target))
    return poses


def default_intrinsics(width: int = 64, height: int = 64) -> CameraIntrinsics:
    return CameraIntrinsics(fx=float(width), fy=float(width), cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)


def render_rgbd(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics,
                cfg: Optional[RenderConfig] = None) -> Tuple[np.ndarray, DepthMap]:
    """Rendered color and rendered depth, the latter valid where opacity exceeds 0.5."""
    out = render(gmap, pose, K, cfg)
    valid = out.alpha_image > DEPTH_ALPHA_MIN
    return np.clip(out.color_image, 0.0, 1.0), DepthMap(out.depth_image, valid)


def synth_frames(gmap: GaussianMap, poses: Sequence[SE3Pose], K: CameraIntrinsics,
                 cfg: Optional[RenderConfig] = None) -> List[Frame]:
    frames = []
    for i, pose in enumerate(poses):
        rgb, depth = render_rgbd(gmap, pose, K, cfg)
        frames.append(Frame(index=i, timestamp=i / FRAME_RATE, rgb=rgb, depth=depth))
    return frames


def corrupt_depth(depth: DepthMap, tail_fraction: float, tail_scale: float,
                  seed: int = 0) -> Tuple[DepthMap, np.ndarray]:
    """
    Multiply a seeded random round(tail_fraction * n_valid) valid pixels by factors
    drawn uniformly from [2, tail_scale], giving a right-skewed depth distribution.

    Returns:
        The corrupted map and the boolean mask of corrupted pixels.
    """
    if not 0.0 <= tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    valid_index = np.flatnonzero(depth.valid)
    count = int(round(tail_fraction * len(valid_index)))
    picked = rng.choice(valid_index, size=count, replace=False) if count else np.zeros(0, dtype=int)
    factors = rng.uniform(2.0, max(tail_scale, 2.0), size=count)

    values = depth.values.copy().reshape(-1)
    values[picked] *= factors
    mask = np.zeros(values.shape, dtype=bool)
    mask[picked] = True
    corrupted = DepthMap(values.reshape(depth.shape), depth.valid.copy(), depth.units_scale)
    logger.debug(f"Corrupted {count} of {len(valid_index)} valid depth pixels.")
    return corrupted, mask.reshape(depth.shape)


def make_smooth_depth(height: int, width: int, base: float = 2.0, tilt: float = 0.5,
                      noise: float = 0.005, seed: int = 0) -> DepthMap:
    """A tilted plane with small Gaussian noise."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:height, 0:width]
    values = base + tilt * (cols / max(width - 1, 1)) + 0.5 * tilt * (rows / max(height - 1, 1))
    return DepthMap.from_values(values + rng.normal(0.0, noise, size=values.shape))


@dataclass
class FilterScore:
    precision: float
    recall: float
    invalidated: int
    corrupted: int


def score_filter(before: DepthMap, after: DepthMap, corruption_mask: np.ndarray) -> FilterScore:
    """Precision and recall of the pixels a filter invalidated against the true corruption mask."""
    invalidated = before.valid & ~after.valid
    truth = np.asarray(corruption_mask, dtype=bool)
    hits = int((invalidated & truth).sum())
    n_invalidated = int(invalidated.sum())
    n_truth = int(truth.sum())
    precision = hits / n_invalidated if n_invalidated else 1.0
    recall = hits / n_truth if n_truth else 1.0
    return FilterScore(precision, recall, n_invalidated, n_truth)


def write_sequence(out_dir: Union[str, Path], frames: Sequence[Frame], poses: Sequence[SE3Pose],
                   K: CameraIntrinsics) -> Path:
    """
    Lay out frames as a TUM-style sequence: rgb/*.png, depth/*.bin (rawf32),
    rgb.txt, depth.txt, groundtruth.txt and intrinsics.txt.
    """
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines = ["# color images\n", "# timestamp filename\n"]
    depth_lines = ["# depth maps\n", "# timestamp filename\n"]
    for i, frame in enumerate(frames):
        stamp = f"{frame.timestamp:.6f}"
        rgb_name = f"rgb/{stamp}.png"
        depth_name = f"depth/{stamp}.bin"
        write_rgb(frame.rgb, out / rgb_name)
        write_depth(frame.depth, out / depth_name)
        rgb_lines.append(f"{stamp} {rgb_name}\n")
        depth_lines.append(f"{stamp} {depth_name}\n")
        logger.info(f"Wrote frame {i + 1} of {len(frames)}")
    (out / "rgb.txt").write_text("".join(rgb_lines))
    (out / "depth.txt").write_text("".join(depth_lines))
    (out / "intrinsics.txt").write_text(f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height}\n")
    write_trajectory_tum(Trajectory.from_poses([f.timestamp for f in frames], poses), out / "groundtruth.txt")
    return out
