# src/udgs_slam/gaussian_map.py
"""
The Gaussian scene map: struct-of-arrays storage of splats with stable ids,
insertion from filtered depth, pruning, and per-group parameter access.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional

import numpy as np
from scipy import ndimage

from .constants import GROUP_WIDTHS, ParameterGroup
from .errors import LengthMismatch
from .geometry import CameraIntrinsics, SE3Pose, quat_to_rotmat, unproject_many
from .schemas import InsertionConfig, SlamConfig

logger = logging.getLogger(__name__)

# Little-endian per-splat record, in GaussianSplat field order
SPLAT_RECORD = np.dtype([
    ("mu_w", "<f8", (3,)),
    ("log_scale", "<f8", (3,)),
    ("rot_q", "<f8", (4,)),
    ("color", "<f8", (3,)),
    ("logit_opacity", "<f8"),
    ("birth_keyframe", "<i8"),
    ("last_observed_frame", "<i8"),
    ("observation_count", "<i8"),
])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSplat:
    """A single scene primitive. Opacity is sigmoid(logit_opacity)."""
    mu_w: np.ndarray
    log_scale: np.ndarray
    rot_q: np.ndarray
    color: np.ndarray
    logit_opacity: float
    birth_keyframe: int = 0
    last_observed_frame: int = 0
    observation_count: int = 0

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.logit_opacity))

    @property
    def covariance(self) -> np.ndarray:
        """Sigma_W = R(q) diag(exp(2 log_scale)) R(q)^T."""
        R = quat_to_rotmat(np.asarray(self.rot_q, dtype=float)[None])[0]
        return R @ np.diag(np.exp(2.0 * np.asarray(self.log_scale, dtype=float))) @ R.T


def eval_gaussian3d(g: GaussianSplat, X, opacity: Optional[float] = None) -> float:
    """
    Opacity-weighted normalized 3D density at X. Diagnostics only; rendering
    uses the unnormalized 2D form.

    Args:
        g: The splat.
        X: World point (3,).
        opacity: Override for the sigmoid opacity (lets o = 0 or 1 be evaluated exactly).

    Returns:
        o * N(X; mu, Sigma).
    """
    o = g.opacity if opacity is None else opacity
    d = np.asarray(X, dtype=float) - np.asarray(g.mu_w, dtype=float)
    cov = g.covariance
    mahalanobis = d @ np.linalg.solve(cov, d)
    norm = (2.0 * np.pi) ** 1.5 * np.sqrt(np.linalg.det(cov))
    return float(o * np.exp(-0.5 * mahalanobis) / norm)


class ParameterGroups(Mapping):
    """
    Flattened views over the map's optimizable arrays, keyed by ParameterGroup value.
    Reads return views (no copy); writes and gradient checks validate lengths.
    """

    def __init__(self, gmap: "GaussianMap"):
        self._map = gmap

    def __getitem__(self, name) -> np.ndarray:
        return self._map._params[ParameterGroup(name)].reshape(-1)

    def __iter__(self) -> Iterator[str]:
        return iter(g.value for g in ParameterGroup)

    def __len__(self) -> int:
        return len(ParameterGroup)

    def expected_length(self, name) -> int:
        return GROUP_WIDTHS[ParameterGroup(name)] * len(self._map)

    def write(self, name, values) -> None:
        values = np.asarray(values, dtype=float).reshape(-1)
        self.check_length(name, values)
        self[name][:] = values
        self._map.generation += 1

    def check_length(self, name, vector) -> None:
        expected = self.expected_length(name)
        if np.size(vector) != expected:
            raise LengthMismatch(
                f"Group '{ParameterGroup(name).value}' expects {expected} values, got {np.size(vector)}"
            )


class GaussianMap:
    """
    Growable splat collection. Splat ids are assigned from a counter and never
    reused; `generation` increments on every edit so renders can detect staleness.
    """

    def __init__(self):
        self._params: Dict[ParameterGroup, np.ndarray] = {
            group: np.zeros((0, width)) for group, width in GROUP_WIDTHS.items()
        }
        self.ids = np.zeros(0, dtype=np.int64)
        self.birth_keyframe = np.zeros(0, dtype=np.int64)
        self.last_observed_frame = np.zeros(0, dtype=np.int64)
        self.observation_count = np.zeros(0, dtype=np.int64)
        self._next_id = 0
        self.generation = 0

    def __len__(self) -> int:
        return len(self.ids)

    # --- Array access ---

    @property
    def mu_w(self) -> np.ndarray:
        return self._params[ParameterGroup.MU_W]

    @property
    def log_scale(self) -> np.ndarray:
        return self._params[ParameterGroup.LOG_SCALE]

    @property
    def rot_q(self) -> np.ndarray:
        return self._params[ParameterGroup.ROT_Q]

    @property
    def color(self) -> np.ndarray:
        return self._params[ParameterGroup.COLOR]

    @property
    def logit_opacity(self) -> np.ndarray:
        return self._params[ParameterGroup.LOGIT_OPACITY][:, 0]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.logit_opacity)

    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.rot_q) if len(self) else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        """World covariances (N, 3, 3)."""
        R = self.rotations()
        M = R * np.exp(self.log_scale)[:, None, :]
        return M @ np.transpose(M, (0, 2, 1))

    def parameter_groups(self) -> ParameterGroups:
        return ParameterGroups(self)

    def splat(self, index: int) -> GaussianSplat:
        return GaussianSplat(
            mu_w=self.mu_w[index].copy(),
            log_scale=self.log_scale[index].copy(),
            rot_q=self.rot_q[index].copy(),
            color=self.color[index].copy(),
            logit_opacity=float(self.logit_opacity[index]),
            birth_keyframe=int(self.birth_keyframe[index]),
            last_observed_frame=int(self.last_observed_frame[index]),
            observation_count=int(self.observation_count[index]),
        )

    def index_of(self, splat_id: int) -> int:
        hits = np.flatnonzero(self.ids == splat_id)
        if not len(hits):
            raise KeyError(f"Splat id {splat_id} not in map")
        return int(hits[0])

    # --- Edits ---

    def add(self, mu_w, log_scale, rot_q, color, logit_opacity, birth_keyframe: int = 0) -> np.ndarray:
        """Append splats given per-group arrays; returns their new ids."""
        mu_w = np.atleast_2d(np.asarray(mu_w, dtype=float))
        n = len(mu_w)
        new_values = {
            ParameterGroup.MU_W: mu_w,
            ParameterGroup.LOG_SCALE: np.atleast_2d(np.asarray(log_scale, dtype=float)),
            ParameterGroup.ROT_Q: np.atleast_2d(np.asarray(rot_q, dtype=float)),
            ParameterGroup.COLOR: np.atleast_2d(np.asarray(color, dtype=float)),
            ParameterGroup.LOGIT_OPACITY: np.asarray(logit_opacity, dtype=float).reshape(n, 1),
        }
        for group, values in new_values.items():
            if values.shape != (n, GROUP_WIDTHS[group]):
                raise LengthMismatch(f"Group '{group.value}' expects shape {(n, GROUP_WIDTHS[group])}, got {values.shape}")
            self._params[group] = np.concatenate([self._params[group], values])
        new_ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        birth = np.full(n, birth_keyframe, dtype=np.int64)
        self.birth_keyframe = np.concatenate([self.birth_keyframe, birth])
        self.last_observed_frame = np.concatenate([self.last_observed_frame, birth])
        self.observation_count = np.concatenate([self.observation_count, np.zeros(n, dtype=np.int64)])
        self.generation += 1
        return new_ids

    def add_splat(self, g: GaussianSplat) -> int:
        ids = self.add(g.mu_w, g.log_scale, g.rot_q, g.color, [g.logit_opacity], g.birth_keyframe)
        i = len(self) - 1
        self.last_observed_frame[i] = g.last_observed_frame
        self.observation_count[i] = g.observation_count
        return int(ids[0])

    def remove(self, mask: np.ndarray) -> int:
        """Drop splats where mask is True; ids of survivors are unchanged."""
        mask = np.asarray(mask, dtype=bool)
        keep = ~mask
        for group in self._params:
            self._params[group] = self._params[group][keep]
        self.ids = self.ids[keep]
        self.birth_keyframe = self.birth_keyframe[keep]
        self.last_observed_frame = self.last_observed_frame[keep]
        self.observation_count = self.observation_count[keep]
        removed = int(mask.sum())
        if removed:
            self.generation += 1
        return removed

    def normalize_quaternions(self) -> None:
        if len(self):
            q = self._params[ParameterGroup.ROT_Q]
            q /= np.linalg.norm(q, axis=1, keepdims=True)

    def clamp_colors(self) -> None:
        np.clip(self._params[ParameterGroup.COLOR], 0.0, 1.0, out=self._params[ParameterGroup.COLOR])

    def record_observations(self, visibility: np.ndarray, generation: int, frame_index: int,
                            eps: float, window: int) -> int:
        """
        Update visibility bookkeeping from a render of this map at `frame_index`.
        observation_count only counts frames within `window` frames after birth,
        which is the span the pruning rule looks at.
        """
        if generation != self.generation:
            raise ValueError(
                f"Visibility is from map generation {generation}, map is at {self.generation}"
            )
        seen = np.asarray(visibility) > eps
        self.last_observed_frame[seen] = frame_index
        age = frame_index - self.birth_keyframe
        counted = seen & (age > 0) & (age <= window)
        self.observation_count[counted] += 1
        return int(seen.sum())

    def copy(self) -> "GaussianMap":
        other = GaussianMap()
        other._params = {group: values.copy() for group, values in self._params.items()}
        other.ids = self.ids.copy()
        other.birth_keyframe = self.birth_keyframe.copy()
        other.last_observed_frame = self.last_observed_frame.copy()
        other.observation_count = self.observation_count.copy()
        other._next_id = self._next_id
        other.generation = self.generation
        return other

    # --- Snapshot records ---

    def to_records(self) -> np.ndarray:
        records = np.zeros(len(self), dtype=SPLAT_RECORD)
        records["mu_w"] = self.mu_w
        records["log_scale"] = self.log_scale
        records["rot_q"] = self.rot_q
        records["color"] = self.color
        records["logit_opacity"] = self.logit_opacity
        records["birth_keyframe"] = self.birth_keyframe
        records["last_observed_frame"] = self.last_observed_frame
        records["observation_count"] = self.observation_count
        return records

    @classmethod
    def from_records(cls, records: np.ndarray) -> "GaussianMap":
        gmap = cls()
        if len(records):
            gmap.add(records["mu_w"], records["log_scale"], records["rot_q"], records["color"],
                     records["logit_opacity"])
            gmap.birth_keyframe = records["birth_keyframe"].astype(np.int64)
            gmap.last_observed_frame = records["last_observed_frame"].astype(np.int64)
            gmap.observation_count = records["observation_count"].astype(np.int64)
        return gmap


# --- Insertion and pruning ---

def image_gradient_magnitude(rgb: np.ndarray) -> np.ndarray:
    gray = np.asarray(rgb, dtype=float).mean(axis=2)
    return np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))


def insert_from_depth(gmap: GaussianMap, frame_rgb: np.ndarray, depth, pose: SE3Pose,
                      K: CameraIntrinsics, mask_already_covered: Optional[np.ndarray],
                      cfg: InsertionConfig, birth_keyframe: int = 0) -> int:
    """
    Back-project a structured subsample of valid, uncovered pixels into new splats.

    Grid samples sit every `cfg.stride` pixels; with gradient boost on, every other
    valid uncovered pixel whose Sobel magnitude is above the configured percentile is
    added too. Splats start isotropic with a 1-sigma screen radius of half their
    sampling stride, identity rotation, the pixel's color and opacity 0.5.

    Returns:
        Number of splats inserted.
    """
    values = depth.values
    H, W = values.shape
    candidates = depth.valid.copy()
    if mask_already_covered is not None:
        candidates &= ~np.asarray(mask_already_covered, dtype=bool)

    rows, cols = np.mgrid[0:H, 0:W]
    on_grid = (rows % cfg.stride == 0) & (cols % cfg.stride == 0)
    grid_pick = candidates & on_grid
    boost_pick = np.zeros_like(grid_pick)
    if cfg.gradient_boost and candidates.any():
        magnitude = image_gradient_magnitude(frame_rgb)
        threshold = np.percentile(magnitude[depth.valid], cfg.gradient_percentile)
        boost_pick = candidates & ~on_grid & (magnitude > threshold)

    v_grid, u_grid = np.nonzero(grid_pick)
    v_boost, u_boost = np.nonzero(boost_pick)
    v = np.concatenate([v_grid, v_boost])
    u = np.concatenate([u_grid, u_boost])
    n = len(v)
    if n == 0:
        return 0

    z = values[v, u]
    strides = np.concatenate([np.full(len(v_grid), float(cfg.stride)), np.ones(len(v_boost))])
    points_c = unproject_many(u, v, z, K)
    points_w = pose.inverse().transform(points_c)
    scale = 0.5 * strides * z / K.fx
    log_scale = np.repeat(np.log(scale)[:, None], 3, axis=1)
    rot_q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    colors = np.clip(np.asarray(frame_rgb, dtype=float)[v, u], 0.0, 1.0)
    gmap.add(points_w, log_scale, rot_q, colors, np.zeros(n), birth_keyframe)
    logger.info(f"Inserted {n} splats ({len(v_grid)} grid, {len(v_boost)} high-gradient) at keyframe {birth_keyframe}.")
    return n


def prune(gmap: GaussianMap, current_frame_index: int, cfg: SlamConfig) -> int:
    """
    Remove splats never observed within `cfg.prune_window` frames after birth,
    and splats whose opacity fell below `cfg.min_opacity`.
    """
    if not len(gmap):
        return 0
    age = current_frame_index - gmap.birth_keyframe
    unstable = (age >= cfg.prune_window) & (gmap.observation_count == 0)
    transparent = gmap.opacity < cfg.min_opacity
    removed = gmap.remove(unstable | transparent)
    if removed:
        logger.info(f"Pruned {removed} splats ({int(unstable.sum())} unobserved, {int(transparent.sum())} transparent).")
    return removed
