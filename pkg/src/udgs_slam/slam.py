# src/udgs_slam/slam.py
"""
Tracking and mapping: per-frame pose optimization against a frozen map, keyframe
management, windowed joint refinement of the map and keyframe poses, and
pipeline initialization.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd

from .depth_filter import DepthMap, iqr_filter
from .errors import EmptyDepth, ShapeMismatch, TrackingDiverged
from .gaussian_map import GaussianMap, insert_from_depth, prune
from .geometry import CameraIntrinsics, SE3Pose
from .optim import GroupAdam, PoseAdam
from .rasterizer import GradientBundle, RenderOutput, covisibility, render, render_backward
from .schemas import SlamConfig

logger = logging.getLogger(__name__)


# --- Types ---

@dataclass
class Frame:
    """One input frame: RGB in [0,1] (H x W x 3) and raw (unfiltered) depth."""
    index: int
    timestamp: float
    rgb: np.ndarray
    depth: DepthMap


@dataclass(eq=False)
class Keyframe:
    frame_index: int
    pose: SE3Pose
    rgb: np.ndarray
    depth: DepthMap             # post-filter
    median_depth: float
    timestamp: float = 0.0

    @classmethod
    def create(cls, frame_index: int, pose: SE3Pose, rgb: np.ndarray, depth: DepthMap,
               timestamp: float = 0.0) -> "Keyframe":
        return cls(frame_index, pose, np.asarray(rgb, dtype=float), depth, depth.median(), timestamp)


@dataclass
class OptimizationWindow:
    """
    `current` holds the most recent keyframes (at most window_size); `random_past`
    is drawn from every earlier keyframe that has left `current`.
    """
    current: List[Keyframe] = field(default_factory=list)
    random_past: List[Keyframe] = field(default_factory=list)
    history: List[Keyframe] = field(default_factory=list)

    @property
    def last(self) -> Keyframe:
        return self.current[-1]

    @property
    def anchor(self) -> Optional[Keyframe]:
        return self.history[0] if self.history else None

    def add(self, kf: Keyframe, window_size: int) -> Optional[Keyframe]:
        """Append a keyframe; returns the evicted one when `current` overflows."""
        self.current.append(kf)
        self.history.append(kf)
        if len(self.current) > window_size:
            return self.current.pop(0)
        return None

    def select_random_past(self, rng: np.random.Generator, count: int) -> List[Keyframe]:
        in_window = {id(kf) for kf in self.current}
        pool = [kf for kf in self.history if id(kf) not in in_window]
        n = min(count, len(pool))
        picks = sorted(rng.choice(len(pool), size=n, replace=False).tolist()) if n else []
        self.random_past = [pool[i] for i in picks]
        return self.random_past

    def members(self) -> List[Keyframe]:
        """random_past + current without duplicates, past keyframes first."""
        seen = set()
        out = []
        for kf in self.random_past + self.current:
            if id(kf) not in seen:
                seen.add(id(kf))
                out.append(kf)
        return out


@dataclass
class LossResult:
    total: float
    e_pho: float
    e_geo: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    geo_mask: np.ndarray
    render: RenderOutput
    warnings: List[str] = field(default_factory=list)


@dataclass
class TrackingResult:
    pose: SE3Pose
    loss: float
    initial_loss: float
    iterations: int
    render: RenderOutput
    e_pho: float = 0.0
    e_geo: float = 0.0
    warnings: List[str] = field(default_factory=list)


@dataclass
class RefineResult:
    losses: List[float] = field(default_factory=list)
    inserted: int = 0
    pruned: int = 0
    skipped_steps: int = 0


@dataclass
class InitResult:
    gmap: GaussianMap
    pose: SE3Pose
    keyframe: Keyframe
    scene_scale: float
    losses: List[float] = field(default_factory=list)


@dataclass
class RunResult:
    timestamps: List[float] = field(default_factory=list)
    poses: List[SE3Pose] = field(default_factory=list)
    keyframes: List[Keyframe] = field(default_factory=list)
    gmap: Optional[GaussianMap] = None
    diagnostics: List[dict] = field(default_factory=list)
    status: str = "ok"

    def diagnostics_table(self) -> pd.DataFrame:
        return pd.DataFrame(self.diagnostics)


# --- Depth ingestion ---

def prepare_depth(raw: DepthMap, cfg: SlamConfig) -> DepthMap:
    """Apply the IQR filter exactly once per frame (or pass through when disabled)."""
    if not cfg.depth_filter.enabled:
        return raw
    return iqr_filter(raw, cfg.depth_filter)


# --- Loss ---

def compute_loss(gmap: GaussianMap, kf: Keyframe, lambda_: float, K: CameraIntrinsics, cfg: SlamConfig,
                 pose: Optional[SE3Pose] = None, rendered: Optional[RenderOutput] = None) -> LossResult:
    """
    total = lambda * e_pho + (1 - lambda) * e_geo, with e_pho the mean L1 color error over
    all pixels and channels and e_geo the mean L1 depth error over pixels that are both
    depth-valid and rendered with opacity above cfg.geo_alpha_threshold. Also returns the
    L1 subgradients w.r.t. the rendered color and depth images.
    """
    pose = kf.pose if pose is None else pose
    out = rendered if rendered is not None else render(gmap, pose, K, cfg.render, keep_cache=True)
    warnings = []

    color_residual = out.color_image - kf.rgb
    e_pho = float(np.mean(np.abs(color_residual)))
    grad_color = lambda_ * np.sign(color_residual) / color_residual.size

    geo_mask = kf.depth.valid & (out.alpha_image > cfg.geo_alpha_threshold)
    count = int(geo_mask.sum())
    grad_depth = np.zeros_like(out.depth_image)
    if count:
        depth_residual = np.where(geo_mask, out.depth_image - kf.depth.values, 0.0)
        e_geo = float(np.abs(depth_residual).sum() / count)
        grad_depth = (1.0 - lambda_) * np.sign(depth_residual) / count
    else:
        e_geo = 0.0
        message = f"No valid pixels for the geometric error at frame {kf.frame_index}"
        logger.warning(message)
        warnings.append(message)

    total = lambda_ * e_pho + (1.0 - lambda_) * e_geo
    return LossResult(total, e_pho, e_geo, grad_color, grad_depth, geo_mask, out, warnings)


def covered_mask(rendered: RenderOutput, depth: DepthMap, cfg: SlamConfig) -> np.ndarray:
    """Pixels the map already explains: opaque enough, or rendered depth within tolerance."""
    opaque = rendered.alpha_image > cfg.insertion.covered_alpha
    close = depth.valid & (np.abs(rendered.depth_image - depth.values)
                           < cfg.insertion.covered_depth_rel * depth.values)
    return opaque | close


# --- Tracking ---

def predict_pose(previous: List[SE3Pose]) -> SE3Pose:
    """Constant-velocity extrapolation from the last two poses."""
    if len(previous) < 2:
        return previous[-1]
    before, last = previous[-2], previous[-1]
    motion = last.compose(before.inverse())
    return motion.compose(last)


def track_frame(gmap: GaussianMap, prev_poses: List[SE3Pose], frame_rgb: np.ndarray,
                frame_depth_filtered: DepthMap, K: CameraIntrinsics, cfg: SlamConfig,
                frame_index: int = 0) -> TrackingResult:
    """
    Optimize the camera pose of one frame with the map frozen. Starts from the
    constant-velocity prediction and returns the lowest-loss pose seen.

    Raises:
        TrackingDiverged: when the final loss exceeds divergence_factor times the initial loss.
    """
    frame = Keyframe(frame_index, predict_pose(prev_poses), np.asarray(frame_rgb, dtype=float),
                     frame_depth_filtered, 0.0)
    optimizer = PoseAdam(cfg.lr.pose_trans, cfg.lr.pose_rot)
    pose = frame.pose
    best = None
    initial_loss = None
    loss = None
    for iteration in range(cfg.tracking_iters + 1):
        loss = compute_loss(gmap, frame, cfg.lambda_, K, cfg, pose=pose)
        if initial_loss is None:
            initial_loss = loss.total
        if best is None or loss.total < best[1].total:
            best = (pose, loss)
        if iteration == cfg.tracking_iters:
            break
        grads = render_backward(gmap, pose, K, loss.grad_color, loss.grad_depth, cfg.render, forward=loss.render)
        if not np.all(np.isfinite(grads.d_pose)):
            logger.warning(f"Non-finite pose gradient at frame {frame_index}, iteration {iteration}. Stopping early.")
            break
        pose = optimizer.step(pose, grads.d_pose)

    if initial_loss > 0 and loss.total > cfg.divergence_factor * initial_loss:
        raise TrackingDiverged(frame_index, initial_loss, loss.total)
    best_pose, best_loss = best
    best_loss.render.cache = None
    logger.debug(f"Tracked frame {frame_index}: loss {initial_loss:.5f} -> {best_loss.total:.5f}")
    return TrackingResult(pose=best_pose, loss=best_loss.total, initial_loss=initial_loss,
                          iterations=cfg.tracking_iters, render=best_loss.render,
                          e_pho=best_loss.e_pho, e_geo=best_loss.e_geo, warnings=best_loss.warnings)


# --- Keyframes ---

def baseline_ratio(candidate: Keyframe, last: Keyframe) -> float:
    baseline = np.linalg.norm(candidate.pose.camera_center - last.pose.camera_center)
    return float(baseline / last.median_depth)


def maybe_insert_keyframe(window: OptimizationWindow, gmap: GaussianMap, candidate: Keyframe,
                          K: CameraIntrinsics, cfg: SlamConfig) -> bool:
    """
    Add `candidate` to the current window when its covisibility with the last keyframe drops below
    the threshold or its baseline relative to that keyframe's median depth is large.
    The first keyframe is always accepted.
    """
    if not window.current:
        window.add(candidate, cfg.window_size)
        return True
    last = window.last
    ratio = baseline_ratio(candidate, last)
    if ratio > cfg.baseline_ratio_threshold:
        reason = f"baseline ratio {ratio:.3f}"
    else:
        covis = covisibility(gmap, candidate.pose, last.pose, K, cfg.render)
        if covis >= cfg.covisibility_threshold:
            return False
        reason = f"covisibility {covis:.3f}"
    evicted = window.add(candidate, cfg.window_size)
    logger.info(f"New keyframe at frame {candidate.frame_index} ({reason}).")
    if evicted is not None:
        logger.debug(f"Keyframe {evicted.frame_index} left the current window.")
    return True


# --- Mapping ---

def map_learning_rates(cfg: SlamConfig, scene_scale: float) -> dict:
    return {
        "mu_w": cfg.lr.mu_w * scene_scale,
        "log_scale": cfg.lr.log_scale,
        "rot_q": cfg.lr.rot_q,
        "color": cfg.lr.color,
        "logit_opacity": cfg.lr.logit_opacity,
    }


def _optimize_map(gmap: GaussianMap, keyframes: List[Keyframe], free_poses: List[Keyframe],
                  K: CameraIntrinsics, cfg: SlamConfig, iterations: int, scene_scale: float,
                  result: RefineResult) -> None:
    """Joint first-order steps on all splat groups and the poses of `free_poses`."""
    if not len(gmap) or not keyframes:
        return
    optimizer = GroupAdam(map_learning_rates(cfg, scene_scale))
    pose_optimizers = {id(kf): PoseAdam(cfg.lr.pose_trans, cfg.lr.pose_rot) for kf in free_poses}
    for iteration in range(iterations):
        total = 0.0
        grads = GradientBundle.zeros(len(gmap))
        pose_grads = {}
        for kf in keyframes:
            loss = compute_loss(gmap, kf, cfg.lambda_, K, cfg)
            total += loss.total
            bundle = render_backward(gmap, kf.pose, K, loss.grad_color, loss.grad_depth, cfg.render,
                                     forward=loss.render)
            grads.add_(bundle)
            if id(kf) in pose_optimizers:
                pose_grads[id(kf)] = bundle.d_pose
        result.losses.append(total)

        if not grads.is_finite() or not all(np.all(np.isfinite(g)) for g in pose_grads.values()):
            result.skipped_steps += 1
            optimizer.scale_lr(0.5)
            for pose_optimizer in pose_optimizers.values():
                pose_optimizer.scale_lr(0.5)
            logger.warning(f"Non-finite gradient at mapping iteration {iteration}; step skipped, learning rates halved.")
            continue

        groups = gmap.parameter_groups()
        for name, grad in grads.groups().items():
            groups.check_length(name, grad)
        optimizer.step(groups, grads.groups())
        gmap.normalize_quaternions()
        gmap.clamp_colors()
        gmap.generation += 1
        for kf in free_poses:
            kf.pose = pose_optimizers[id(kf)].step(kf.pose, pose_grads[id(kf)])


def map_refine(gmap: GaussianMap, window: OptimizationWindow, K: CameraIntrinsics, cfg: SlamConfig,
               rng: np.random.Generator, scene_scale: float,
               new_keyframe: Optional[Keyframe] = None) -> RefineResult:
    """
    Windowed joint refinement over the current and random past keyframes. Splat groups
    and the current keyframe poses are optimized; random past poses and the first
    keyframe (gauge anchor) stay fixed.
    When `new_keyframe` is given, new splats are inserted from it first.
    Pruning runs every cfg.prune_every keyframes.
    """
    result = RefineResult()
    if new_keyframe is not None:
        rendered = render(gmap, new_keyframe.pose, K, cfg.render)
        covered = covered_mask(rendered, new_keyframe.depth, cfg)
        result.inserted = insert_from_depth(gmap, new_keyframe.rgb, new_keyframe.depth, new_keyframe.pose, K,
                                            covered, cfg.insertion, birth_keyframe=new_keyframe.frame_index)

    window.select_random_past(rng, cfg.random_past)
    members = window.members()
    anchor = window.anchor
    free_poses = [kf for kf in window.current if kf is not anchor]
    _optimize_map(gmap, members, free_poses, K, cfg, cfg.mapping_iters, scene_scale, result)

    if len(window.history) % cfg.prune_every == 0:
        newest = window.last.frame_index
        result.pruned = prune(gmap, newest, cfg)
    return result


# --- Initialization ---

def initialize(first_frame_rgb: np.ndarray, first_depth_filtered: DepthMap, K: CameraIntrinsics,
               initial_pose: Optional[SE3Pose], cfg: SlamConfig, frame_index: int = 0,
               timestamp: float = 0.0) -> InitResult:
    """
    Seed the map from the first frame's filtered depth and refine the map alone.
    The first pose is the identity unless a known world pose is supplied.
    """
    if not first_depth_filtered.valid.any():
        raise EmptyDepth("First depth map has no valid pixels; cannot initialize")
    pose = initial_pose if initial_pose is not None else SE3Pose.identity()
    keyframe = Keyframe.create(frame_index, pose, first_frame_rgb, first_depth_filtered, timestamp)
    scene_scale = keyframe.median_depth

    gmap = GaussianMap()
    insert_from_depth(gmap, keyframe.rgb, first_depth_filtered, pose, K, None, cfg.insertion,
                      birth_keyframe=frame_index)
    result = RefineResult()
    _optimize_map(gmap, [keyframe], [], K, cfg, cfg.init_iters, scene_scale, result)
    if result.losses:
        logger.info(f"Initialized map with {len(gmap)} splats; loss {result.losses[0]:.5f} -> {result.losses[-1]:.5f}")
    return InitResult(gmap=gmap, pose=pose, keyframe=keyframe, scene_scale=scene_scale, losses=result.losses)


# --- Pipeline ---

def run(frames: Iterable[Frame], K: CameraIntrinsics, cfg: SlamConfig,
        initial_pose: Optional[SE3Pose] = None, total_frames: Optional[int] = None) -> RunResult:
    """
    Full pipeline: filter depth, track, decide keyframes, insert and refine.

    On TrackingDiverged the exception is re-raised with the partial RunResult
    attached as `exc.partial`.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    result = RunResult()
    window = OptimizationWindow()
    gmap = None
    scene_scale = 1.0
    frame_keyframe = {}

    for frame in frames:
        total = total_frames if total_frames is not None else "?"
        logger.info(f"Processing frame {frame.index + 1} of {total} (t={frame.timestamp:.6f})")
        if frame.rgb.shape != (K.height, K.width, 3) or frame.depth.shape != (K.height, K.width):
            raise ShapeMismatch(f"Frame {frame.index} is {frame.rgb.shape} rgb and {frame.depth.shape} depth, "
                                f"camera expects {K.height}x{K.width}")
        depth = prepare_depth(frame.depth, cfg)
        row = {"frame": frame.index, "timestamp": frame.timestamp, "keyframe": False,
               "inserted": 0, "pruned": 0}

        if gmap is None:
            init = initialize(frame.rgb, depth, K, initial_pose, cfg, frame.index, frame.timestamp)
            gmap, scene_scale = init.gmap, init.scene_scale
            result.gmap = gmap
            maybe_insert_keyframe(window, gmap, init.keyframe, K, cfg)
            frame_keyframe[len(result.poses)] = init.keyframe
            result.timestamps.append(frame.timestamp)
            result.poses.append(init.pose)
            row.update(keyframe=True, inserted=len(gmap), splats=len(gmap),
                       loss=init.losses[-1] if init.losses else float("nan"))
            result.diagnostics.append(row)
            continue

        try:
            tracking = track_frame(gmap, result.poses[-2:], frame.rgb, depth, K, cfg, frame.index)
        except TrackingDiverged as exc:
            result.status = "tracking_diverged"
            _finalize(result, window, frame_keyframe)
            exc.partial = result
            raise
        gmap.record_observations(tracking.render.visibility, tracking.render.generation, frame.index,
                                 cfg.render.visibility_eps, cfg.prune_window)
        result.timestamps.append(frame.timestamp)
        result.poses.append(tracking.pose)
        row.update(loss=tracking.loss, e_pho=tracking.e_pho, e_geo=tracking.e_geo,
                   tracking_iters=tracking.iterations, warnings=len(tracking.warnings))

        candidate = Keyframe.create(frame.index, tracking.pose, frame.rgb, depth, frame.timestamp) \
            if depth.valid.any() else None
        if candidate is not None and maybe_insert_keyframe(window, gmap, candidate, K, cfg):
            frame_keyframe[len(result.poses) - 1] = candidate
            refined = map_refine(gmap, window, K, cfg, rng, scene_scale, new_keyframe=candidate)
            row.update(keyframe=True, inserted=refined.inserted, pruned=refined.pruned,
                       skipped_steps=refined.skipped_steps)
            # keyframe poses may have moved during refinement
            for position, kf in frame_keyframe.items():
                result.poses[position] = kf.pose
        row["splats"] = len(gmap)
        result.diagnostics.append(row)

    _finalize(result, window, frame_keyframe)
    return result


def _finalize(result: RunResult, window: OptimizationWindow, frame_keyframe: dict) -> None:
    for position, kf in frame_keyframe.items():
        result.poses[position] = kf.pose
    result.keyframes = list(window.history)
