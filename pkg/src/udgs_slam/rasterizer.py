# src/udgs_slam/rasterizer.py
"""
Differentiable 2D splatting of the Gaussian map: front-to-back alpha blending of
color and depth over 16x16 tiles, and the explicit backward pass to every splat
parameter group and the camera pose tangent.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import numpy as np

from .errors import BehindCamera
from .gaussian_map import GaussianMap, GaussianSplat
from .geometry import (CameraIntrinsics, SE3Pose, project, project_many, projection_jacobian,
                       projection_jacobian_many, quat_to_rotmat, quat_to_rotmat_backward, vee)
from .schemas import RenderConfig
from .settings import get_thread_count

logger = logging.getLogger(__name__)


# --- Types ---

@dataclass
class Splat2D:
    """A splat after projection into the image."""
    mu_i: np.ndarray
    cov_i: np.ndarray
    depth_c: float
    color: np.ndarray
    opacity: float
    source_id: int


@dataclass
class RenderOutput:
    color_image: np.ndarray         # H x W x 3
    depth_image: np.ndarray         # H x W, 0 where nothing was blended
    alpha_image: np.ndarray         # H x W, 1 - final transmittance
    visibility: np.ndarray          # per map splat, max blending weight
    final_transmittance: np.ndarray
    splat_ids: np.ndarray
    generation: int
    cache: Optional[Any] = field(default=None, repr=False, compare=False)

    def visible_ids(self, eps: float) -> set:
        return set(self.splat_ids[self.visibility > eps].tolist())


@dataclass
class GradientBundle:
    """Gradients of the scalarized render w.r.t. each parameter group (flattened) and the pose tangent."""
    d_mu_w: np.ndarray
    d_log_scale: np.ndarray
    d_rot_q: np.ndarray
    d_color: np.ndarray
    d_logit_opacity: np.ndarray
    d_pose: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @classmethod
    def zeros(cls, n: int) -> "GradientBundle":
        return cls(np.zeros(3 * n), np.zeros(3 * n), np.zeros(4 * n), np.zeros(3 * n), np.zeros(n), np.zeros(6))

    def groups(self) -> dict:
        return {
            "mu_w": self.d_mu_w,
            "log_scale": self.d_log_scale,
            "rot_q": self.d_rot_q,
            "color": self.d_color,
            "logit_opacity": self.d_logit_opacity,
        }

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.groups().values()) and bool(np.all(np.isfinite(self.d_pose)))

    def add_(self, other: "GradientBundle") -> None:
        """Accumulate splat-group gradients in place (pose gradients are per view and not summed)."""
        self.d_mu_w += other.d_mu_w
        self.d_log_scale += other.d_log_scale
        self.d_rot_q += other.d_rot_q
        self.d_color += other.d_color
        self.d_logit_opacity += other.d_logit_opacity


@dataclass
class _Projection:
    """Surviving splats of one view, sorted front-to-back, with what the backward pass needs."""
    index: np.ndarray       # map indices
    mu_c: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray      # tile binning radius (px)
    J: np.ndarray
    cov_w: np.ndarray
    rot_w: np.ndarray
    scale: np.ndarray


# --- Projection ---

def splat_project(g: GaussianSplat, pose: SE3Pose, K: CameraIntrinsics,
                  cfg: Optional[RenderConfig] = None, source_id: int = 0) -> Optional[Splat2D]:
    """
    Project one splat. Returns None when it is culled (behind the near plane, or its
    center more than cfg.cull_sigma standard deviations outside the image).
    """
    cfg = cfg or RenderConfig()
    mu_c = pose.rotation @ np.asarray(g.mu_w, dtype=float) + pose.translation
    try:
        mu_i = project(mu_c, K, cfg.z_min)
        J = projection_jacobian(mu_c, K, cfg.z_min)
    except BehindCamera:
        return None
    M = J @ pose.rotation
    cov_i = M @ g.covariance @ M.T + cfg.cov_floor * np.eye(2)
    sigma = np.sqrt(np.linalg.eigvalsh(cov_i).max())
    if _outside_image(mu_i[None], np.array([sigma]), K, cfg.cull_sigma)[0]:
        return None
    return Splat2D(mu_i=mu_i, cov_i=cov_i, depth_c=float(mu_c[2]), color=np.asarray(g.color, dtype=float),
                   opacity=g.opacity, source_id=source_id)


def _outside_image(mean2d: np.ndarray, sigma: np.ndarray, K: CameraIntrinsics, n_sigma: float) -> np.ndarray:
    margin = n_sigma * sigma
    return ((mean2d[:, 0] < -margin) | (mean2d[:, 0] > K.width - 1 + margin)
            | (mean2d[:, 1] < -margin) | (mean2d[:, 1] > K.height - 1 + margin))


def _max_eigenvalue(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    return 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)


def project_splats(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, cfg: RenderConfig) -> _Projection:
    """Batched splat_project over the map; output sorted by (depth, id)."""
    n = len(gmap)
    mu_c_all = pose.transform(gmap.mu_w) if n else np.zeros((0, 3))
    in_front = mu_c_all[:, 2] > cfg.z_min
    idx = np.flatnonzero(in_front)

    mu_c = mu_c_all[idx]
    rot_w = quat_to_rotmat(gmap.rot_q[idx]) if len(idx) else np.zeros((0, 3, 3))
    scale = np.exp(gmap.log_scale[idx])
    Ms = rot_w * scale[:, None, :]
    cov_w = Ms @ np.transpose(Ms, (0, 2, 1))
    J = projection_jacobian_many(mu_c, K)
    M = J @ pose.rotation
    cov2d = M @ cov_w @ np.transpose(M, (0, 2, 1)) + cfg.cov_floor * np.eye(2)
    mean2d = project_many(mu_c, K) if len(idx) else np.zeros((0, 2))
    sigma = np.sqrt(_max_eigenvalue(cov2d))

    keep = ~_outside_image(mean2d, sigma, K, cfg.cull_sigma)
    order = np.lexsort((gmap.ids[idx][keep], mu_c[keep, 2]))
    sel = np.flatnonzero(keep)[order]

    cov2d = cov2d[sel]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det

    index = idx[sel]
    return _Projection(
        index=index,
        mu_c=mu_c[sel],
        mean2d=mean2d[sel],
        cov2d=cov2d,
        conic=conic,
        depth=mu_c[sel, 2],
        color=gmap.color[index],
        opacity=gmap.opacity[index],
        radius=cfg.tile_sigma * sigma[sel],
        J=J[sel],
        cov_w=cov_w[sel],
        rot_w=rot_w[sel],
        scale=scale[sel],
    )


# --- Tiles ---

@dataclass
class _Tile:
    x0: int
    x1: int
    y0: int
    y1: int
    splats: np.ndarray   # positions into the projection, front-to-back


def _bin_tiles(proj: _Projection, K: CameraIntrinsics, tile_size: int) -> List[_Tile]:
    tiles = []
    lo = proj.mean2d - proj.radius[:, None]
    hi = proj.mean2d + proj.radius[:, None]
    for y0 in range(0, K.height, tile_size):
        y1 = min(y0 + tile_size, K.height)
        for x0 in range(0, K.width, tile_size):
            x1 = min(x0 + tile_size, K.width)
            overlap = ((hi[:, 0] >= x0) & (lo[:, 0] <= x1 - 1)
                       & (hi[:, 1] >= y0) & (lo[:, 1] <= y1 - 1))
            tiles.append(_Tile(x0, x1, y0, y1, np.flatnonzero(overlap)))
    return tiles


def _tile_pixels(tile: _Tile) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[tile.y0:tile.y1, tile.x0:tile.x1]
    return xs.reshape(-1).astype(float), ys.reshape(-1).astype(float)


def _blend_tile(proj: _Projection, tile: _Tile, cfg: RenderConfig):
    """
    Forward blending for one tile; returns per-pixel outputs and the intermediates for backward.
    Splats are blended in chunks of cfg.blend_chunk, and blending stops once every pixel of
    the tile has transmittance below cfg.t_stop. Splats past that point carry zero weight, so
    `cache["s"]` may be shorter than `tile.splats`.
    """
    px, py = _tile_pixels(tile)
    n_pix = len(px)
    chunks = []
    T_run = np.ones(n_pix)
    for start in range(0, len(tile.splats), cfg.blend_chunk):
        s = tile.splats[start:start + cfg.blend_chunk]
        dx = px[None, :] - proj.mean2d[s, 0, None]
        dy = py[None, :] - proj.mean2d[s, 1, None]
        a = proj.conic[s, 0, 0, None]
        b = proj.conic[s, 0, 1, None]
        c = proj.conic[s, 1, 1, None]
        G = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        raw = proj.opacity[s, None] * G
        alpha = np.minimum(raw, cfg.alpha_max)
        one_minus = 1.0 - alpha
        T = np.empty_like(alpha)
        T[0] = T_run
        if len(s) > 1:
            T[1:] = T_run[None, :] * np.cumprod(one_minus[:-1], axis=0)
        T_run = T[-1] * one_minus[-1]
        chunks.append(dict(s=s, dx=dx, dy=dy, G=G, raw=raw, alpha=alpha, one_minus=one_minus, T=T))
        if cfg.t_stop > 0 and np.all(T_run < cfg.t_stop):
            break

    if chunks:
        cache = {key: np.concatenate([chunk[key] for chunk in chunks], axis=0) for key in chunks[0]}
    else:
        cache = {key: np.zeros((0, n_pix)) for key in ("dx", "dy", "G", "raw", "alpha", "one_minus", "T")}
        cache["s"] = tile.splats[:0]
    s, alpha, T, one_minus = cache["s"], cache["alpha"], cache["T"], cache["one_minus"]
    include = T >= cfg.t_stop if cfg.t_stop > 0 else np.ones_like(alpha, dtype=bool)
    w = alpha * T * include
    cache.update(include=include, w=w)

    color = w.T @ proj.color[s] if len(s) else np.zeros((n_pix, 3))
    depth = w.T @ proj.depth[s] if len(s) else np.zeros(n_pix)
    T_final = np.prod(np.where(include, one_minus, 1.0), axis=0) if len(s) else np.ones(n_pix)
    vis = w.max(axis=1) if len(s) else np.zeros(0)
    return color, depth, T_final, vis, cache


def _render_tiles(proj: _Projection, tiles: List[_Tile], cfg: RenderConfig, worker):
    threads = get_thread_count()
    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, tiles))
    return [worker(tile) for tile in tiles]


@dataclass
class _ForwardCache:
    """What render_backward needs from a forward pass to skip recomputing it."""
    pose_matrix: np.ndarray
    generation: int
    n_splats: int
    proj: _Projection
    tiles: List[_Tile]
    blends: List[dict]

    def matches(self, gmap: GaussianMap, pose: SE3Pose) -> bool:
        return (self.generation == gmap.generation and self.n_splats == len(gmap)
                and np.array_equal(self.pose_matrix, pose.matrix))


# --- Forward ---

def render(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, cfg: Optional[RenderConfig] = None,
           keep_cache: bool = False) -> RenderOutput:
    """
    Render color, depth and accumulated opacity from `pose`. Per pixel,
    C = sum_i alpha_i T_i c_i and D = sum_i alpha_i T_i z_i over splats in
    front-to-back order, stopping once transmittance drops below cfg.t_stop.

    With keep_cache the blending intermediates are attached to the output, and
    render_backward reuses them when handed that output as `forward`.
    """
    cfg = cfg or RenderConfig()
    H, W = K.height, K.width
    proj = project_splats(gmap, pose, K, cfg)
    tiles = _bin_tiles(proj, K, cfg.tile_size)

    color_image = np.zeros((H, W, 3))
    depth_image = np.zeros((H, W))
    T_image = np.ones((H, W))
    vis_proj = np.zeros(len(proj.index))

    results = _render_tiles(proj, tiles, cfg, lambda tile: _blend_tile(proj, tile, cfg))
    for tile, (color, depth, T_final, vis, blend) in zip(tiles, results):
        h, w = tile.y1 - tile.y0, tile.x1 - tile.x0
        color_image[tile.y0:tile.y1, tile.x0:tile.x1] = color.reshape(h, w, 3)
        depth_image[tile.y0:tile.y1, tile.x0:tile.x1] = depth.reshape(h, w)
        T_image[tile.y0:tile.y1, tile.x0:tile.x1] = T_final.reshape(h, w)
        if len(blend["s"]):
            np.maximum.at(vis_proj, blend["s"], vis)

    cache = None
    if keep_cache:
        cache = _ForwardCache(pose.matrix.copy(), gmap.generation, len(gmap), proj, tiles,
                              [result[4] for result in results])

    visibility = np.zeros(len(gmap))
    visibility[proj.index] = vis_proj
    return RenderOutput(
        color_image=color_image,
        depth_image=depth_image,
        alpha_image=1.0 - T_image,
        visibility=visibility,
        final_transmittance=T_image,
        splat_ids=gmap.ids.copy(),
        generation=gmap.generation,
        cache=cache,
    )


def render_naive(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, cfg: Optional[RenderConfig] = None) -> RenderOutput:
    """
    Per-pixel reference evaluator: no tiles, no early termination. Slow; used as
    the oracle for the tiled renderer.
    """
    cfg = cfg or RenderConfig()
    H, W = K.height, K.width
    proj = project_splats(gmap, pose, K, cfg)
    color_image = np.zeros((H, W, 3))
    depth_image = np.zeros((H, W))
    T_image = np.ones((H, W))
    vis_proj = np.zeros(len(proj.index))
    for v in range(H):
        for u in range(W):
            T = 1.0
            for k in range(len(proj.index)):
                d = np.array([u, v], dtype=float) - proj.mean2d[k]
                power = -0.5 * d @ proj.conic[k] @ d
                alpha = min(proj.opacity[k] * np.exp(power), cfg.alpha_max)
                weight = alpha * T
                color_image[v, u] += weight * proj.color[k]
                depth_image[v, u] += weight * proj.depth[k]
                vis_proj[k] = max(vis_proj[k], weight)
                T *= 1.0 - alpha
            T_image[v, u] = T
    visibility = np.zeros(len(gmap))
    visibility[proj.index] = vis_proj
    return RenderOutput(color_image, depth_image, 1.0 - T_image, visibility, T_image,
                        gmap.ids.copy(), gmap.generation)


# --- Backward ---

def _backward_tile(proj: _Projection, tile: _Tile, cfg: RenderConfig, grad_color: np.ndarray, grad_depth: np.ndarray,
                   cache: Optional[dict] = None):
    """Gradients w.r.t. 2D splat quantities for the splats of one tile."""
    if not len(tile.splats):
        return None
    if cache is None:
        cache = _blend_tile(proj, tile, cfg)[4]
    s = cache["s"]
    gC = grad_color[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 3)
    gD = grad_depth[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1)
    w, T, G = cache["w"], cache["T"], cache["G"]
    dx, dy = cache["dx"], cache["dy"]

    d_color = w @ gC
    d_depth = w @ gD

    # per-pixel upstream for each splat's blended value
    f = proj.color[s] @ gC.T + proj.depth[s, None] * gD[None, :]
    wf = w * f
    behind = np.cumsum(wf[::-1], axis=0)[::-1] - wf      # sum over splats behind i
    d_alpha = cache["include"] * (T * f - behind / cache["one_minus"])
    d_raw = np.where(cache["raw"] > cfg.alpha_max, 0.0, d_alpha)

    d_opacity = np.sum(d_raw * G, axis=1)
    d_power = d_raw * proj.opacity[s, None] * G

    a = proj.conic[s, 0, 0, None]
    b = proj.conic[s, 0, 1, None]
    c = proj.conic[s, 1, 1, None]
    d_mean = np.stack([np.sum(d_power * (a * dx + b * dy), axis=1),
                       np.sum(d_power * (b * dx + c * dy), axis=1)], axis=-1)
    d_conic = np.empty((len(s), 2, 2))
    d_conic[:, 0, 0] = -0.5 * np.sum(d_power * dx * dx, axis=1)
    d_conic[:, 1, 1] = -0.5 * np.sum(d_power * dy * dy, axis=1)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = -0.5 * np.sum(d_power * dx * dy, axis=1)
    return s, d_mean, d_conic, d_color, d_depth, d_opacity


def render_backward(gmap: GaussianMap, pose: SE3Pose, K: CameraIntrinsics, grad_color: np.ndarray,
                    grad_depth: np.ndarray, cfg: Optional[RenderConfig] = None,
                    forward: Optional[RenderOutput] = None) -> GradientBundle:
    """
    Exact gradients of sum_p grad_color(p).C(p) + grad_depth(p) D(p) w.r.t. every
    splat parameter group and the left-perturbation pose tangent (rho, phi).
    The forward state is taken from `forward` when it was rendered with keep_cache
    from this map state and pose, and recomputed from the same inputs otherwise.
    """
    cfg = cfg or RenderConfig()
    n = len(gmap)
    bundle = GradientBundle.zeros(n)
    grad_color = np.asarray(grad_color, dtype=float)
    grad_depth = np.asarray(grad_depth, dtype=float)
    if n == 0 or (not np.any(grad_color) and not np.any(grad_depth)):
        return bundle

    cached = forward.cache if forward is not None else None
    if cached is not None and cached.matches(gmap, pose):
        proj, tiles, blends = cached.proj, cached.tiles, cached.blends
    else:
        proj = project_splats(gmap, pose, K, cfg)
        tiles = _bin_tiles(proj, K, cfg.tile_size)
        blends = [None] * len(tiles)
    m = len(proj.index)
    if m == 0:
        return bundle
    by_tile = dict(zip(map(id, tiles), blends))
    results = _render_tiles(proj, tiles, cfg,
                            lambda tile: _backward_tile(proj, tile, cfg, grad_color, grad_depth, by_tile[id(tile)]))

    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 2, 2))
    d_color = np.zeros((m, 3))
    d_depth = np.zeros(m)
    d_opacity = np.zeros(m)
    # reduce in tile order so the result does not depend on scheduling
    for result in results:
        if result is None:
            continue
        s, t_mean, t_conic, t_color, t_depth, t_opacity = result
        d_mean[s] += t_mean
        d_conic[s] += t_conic
        d_color[s] += t_color
        d_depth[s] += t_depth
        d_opacity[s] += t_opacity

    # conic = cov2d^-1
    A = proj.conic
    d_cov2d = -A @ d_conic @ A

    # cov2d = M cov_w M^T + floor, M = J R
    R = pose.rotation
    M = proj.J @ R
    Mt = np.transpose(M, (0, 2, 1))
    d_cov_w = Mt @ d_cov2d @ M
    d_M = 2.0 * d_cov2d @ M @ proj.cov_w
    d_J = d_M @ R.T
    d_R_view = np.sum(np.transpose(proj.J, (0, 2, 1)) @ d_M, axis=0)

    # mu_c through the projected mean, the Jacobian J(mu_c), and the depth value
    x, y, z = proj.mu_c[:, 0], proj.mu_c[:, 1], proj.mu_c[:, 2]
    d_mu_c = np.einsum("nij,ni->nj", proj.J, d_mean)
    d_mu_c[:, 0] += -K.fx / z ** 2 * d_J[:, 0, 2]
    d_mu_c[:, 1] += -K.fy / z ** 2 * d_J[:, 1, 2]
    d_mu_c[:, 2] += (-K.fx / z ** 2 * d_J[:, 0, 0] + 2.0 * K.fx * x / z ** 3 * d_J[:, 0, 2]
                     - K.fy / z ** 2 * d_J[:, 1, 1] + 2.0 * K.fy * y / z ** 3 * d_J[:, 1, 2])
    d_mu_c[:, 2] += d_depth

    # cov_w = (Rq S)(Rq S)^T
    Ms = proj.rot_w * proj.scale[:, None, :]
    d_Ms = 2.0 * d_cov_w @ Ms
    d_scale = np.sum(d_Ms * proj.rot_w, axis=1)
    d_rot_w = d_Ms * proj.scale[:, None, :]

    index = proj.index
    d_mu_w = d_mu_c @ R
    d_log_scale = d_scale * proj.scale
    d_rot_q = quat_to_rotmat_backward(gmap.rot_q[index], d_rot_w)
    d_logit = d_opacity * proj.opacity * (1.0 - proj.opacity)

    bundle.d_mu_w.reshape(n, 3)[index] = d_mu_w
    bundle.d_log_scale.reshape(n, 3)[index] = d_log_scale
    bundle.d_rot_q.reshape(n, 4)[index] = d_rot_q
    bundle.d_color.reshape(n, 3)[index] = d_color
    bundle.d_logit_opacity[index] = d_logit

    # pose: mu_c' = exp(xi) mu_c gives [I | -skew(mu_c)]; R' = exp(phi) R gives vee(N - N^T)
    d_rho = d_mu_c.sum(axis=0)
    d_phi = np.cross(proj.mu_c, d_mu_c).sum(axis=0)
    N = d_R_view @ R.T
    d_phi += vee(N - N.T)
    bundle.d_pose = np.concatenate([d_rho, d_phi])
    return bundle


# --- Covisibility ---

def covisibility(gmap: GaussianMap, pose_a: SE3Pose, pose_b: SE3Pose, K: CameraIntrinsics,
                 cfg: Optional[RenderConfig] = None) -> float:
    """Intersection over union of the splat sets observed from two poses; 1 when both are empty."""
    cfg = cfg or RenderConfig()
    seen_a = render(gmap, pose_a, K, cfg).visible_ids(cfg.visibility_eps)
    seen_b = render(gmap, pose_b, K, cfg).visible_ids(cfg.visibility_eps)
    union = seen_a | seen_b
    if not union:
        return 1.0
    return len(seen_a & seen_b) / len(union)
