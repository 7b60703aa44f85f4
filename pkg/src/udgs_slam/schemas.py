from datetime import datetime
from typing import Dict, Optional

from pydantic import BaseModel, Field

from .constants import FilterMode

# --- Rendering ---

class RenderConfig(BaseModel):
    """Rasterizer settings shared by forward and backward passes."""
    z_min: float = Field(0.01, gt=0, description="Near plane (m); points at or in front are culled")
    cov_floor: float = Field(0.3, ge=0, description="Added to the 2D covariance diagonal (px^2)")
    alpha_max: float = Field(0.999, gt=0, lt=1, description="Clamp on per-splat blending weight")
    t_stop: float = Field(1e-4, ge=0, lt=1, description="Per-pixel early-termination transmittance; 0 disables")
    visibility_eps: float = Field(1e-3, ge=0, lt=1, description="Blending weight above which a splat counts as observed")
    tile_size: int = Field(16, ge=1, description="Tile edge length (px)")
    tile_sigma: float = Field(6.0, gt=0, description="Splat-to-tile binning radius in standard deviations")
    cull_sigma: float = Field(3.0, gt=0, description="Splats whose center is this many sigmas outside the image are culled")
    blend_chunk: int = Field(32, ge=1, description="Splats blended per step before the per-tile early-stop check")

    class Config:
        extra = "forbid"
        json_schema_extra = {
            "example": {
                "z_min": 0.01,
                "cov_floor": 0.3,
                "alpha_max": 0.999,
                "t_stop": 1e-4,
                "visibility_eps": 1e-3,
                "tile_size": 16,
            }
        }

# --- Depth filtering ---

class DepthFilterConfig(BaseModel):
    """IQR outlier filter settings."""
    enabled: bool = Field(True, description="False feeds the raw validity mask to the pipeline")
    mode: FilterMode = Field(FilterMode.PATCH, description="Quartile region: whole image or non-overlapping patches")
    window: int = Field(16, ge=2, description="Patch edge length (px) in patch mode")
    k: float = Field(1.5, ge=0, description="Tukey fence multiplier")
    min_samples: int = Field(16, ge=2, description="Regions with fewer valid pixels pass through unfiltered")

    class Config:
        extra = "forbid"
        json_schema_extra = {
            "example": {"enabled": True, "mode": "patch", "window": 16, "k": 1.5, "min_samples": 16}
        }

# --- Map insertion ---

class InsertionConfig(BaseModel):
    """Placement of new splats from a filtered depth map."""
    stride: int = Field(4, ge=1, description="Grid sampling stride (px)")
    gradient_boost: bool = Field(True, description="Add samples at high image-gradient pixels")
    gradient_percentile: float = Field(90.0, ge=0, le=100, description="Sobel magnitude percentile above which pixels are added")
    covered_alpha: float = Field(0.9, ge=0, le=1, description="Rendered opacity above which a pixel counts as covered")
    covered_depth_rel: float = Field(0.1, ge=0, description="Relative depth agreement under which a pixel counts as covered")

    class Config:
        extra = "forbid"

# --- Optimizer ---

class LearningRates(BaseModel):
    """Per-group Adam step sizes. mu_w is multiplied by the scene scale (median first-frame depth)."""
    mu_w: float = Field(1e-4, gt=0)
    log_scale: float = Field(5e-3, gt=0)
    rot_q: float = Field(1e-3, gt=0)
    color: float = Field(2.5e-3, gt=0)
    logit_opacity: float = Field(5e-2, gt=0)
    pose_rot: float = Field(1e-3, gt=0, description="rad per step")
    pose_trans: float = Field(3e-4, gt=0, description="m per step")

    class Config:
        extra = "forbid"

# --- SLAM ---

class SlamConfig(BaseModel):
    """Every knob of a run; serialized verbatim into the run manifest."""
    lambda_: float = Field(0.9, ge=0, le=1, alias="lambda", description="Photometric weight in the total loss")
    window_size: int = Field(8, ge=1, description="Maximum keyframes in the current window")
    random_past: int = Field(2, ge=0, description="Randomly drawn past keyframes per refinement")
    covisibility_threshold: float = Field(0.9, ge=0, le=1)
    baseline_ratio_threshold: float = Field(0.08, ge=0)
    tracking_iters: int = Field(60, ge=0)
    mapping_iters: int = Field(100, ge=0)
    init_iters: int = Field(300, ge=0)
    divergence_factor: float = Field(2.0, gt=0)
    prune_every: int = Field(1, ge=1, description="Prune every n keyframes")
    prune_window: int = Field(3, ge=1, description="Frames after birth in which a splat must be observed")
    min_opacity: float = Field(0.005, ge=0, lt=1)
    geo_alpha_threshold: float = Field(0.5, ge=0, le=1, description="Rendered opacity required for a pixel to enter the geometric error")
    rng_seed: int = Field(0)
    render: RenderConfig = Field(default_factory=RenderConfig)
    depth_filter: DepthFilterConfig = Field(default_factory=DepthFilterConfig)
    insertion: InsertionConfig = Field(default_factory=InsertionConfig)
    lr: LearningRates = Field(default_factory=LearningRates)

    class Config:
        extra = "forbid"
        populate_by_name = True
        json_schema_extra = {
            "example": {
                "lambda": 0.9,
                "window_size": 8,
                "covisibility_threshold": 0.9,
                "baseline_ratio_threshold": 0.08,
                "tracking_iters": 60,
                "mapping_iters": 100,
                "rng_seed": 0,
            }
        }

    @classmethod
    def synthetic_orbit(cls, **overrides) -> "SlamConfig":
        """
        Settings for the 50-frame, 64x64 synthetic orbit check: fewer tracking and
        mapping iterations, a longer initialization and a shorter window, so the
        whole run stays within ten minutes on one core.
        """
        values = dict(SYNTHETIC_ORBIT_OVERRIDES)
        values.update(overrides)
        return cls(**values)


SYNTHETIC_ORBIT_OVERRIDES = {
    "tracking_iters": 30,
    "mapping_iters": 60,
    "init_iters": 500,
    "window_size": 5,
}

# --- Synthetic scenes ---

class SceneSpec(BaseModel):
    n_splats: int = Field(..., ge=1)
    extent: float = Field(2.0, gt=0, description="Edge length (m) of the cube holding splat centers")
    seed: int = 0

# --- Run outputs ---

class MetricsRow(BaseModel):
    """One CSV row per evaluated sequence."""
    sequence: str
    ate_rmse_m: Optional[float] = None
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    frames: int
    keyframes: int
    aligned_scale: float = 1.0
    evaluated_on: str = Field("frames", description="'frames' or 'keyframes'")
    lpips: str = "n/a"


class RunManifest(BaseModel):
    """Everything needed to reproduce a run bit-for-bit."""
    version: str
    created_at: datetime
    sequence_dir: str
    config: Dict
    rng_seed: int
    threads: int
    input_hashes: Dict[str, str]
    status: str = "ok"
    message: Optional[str] = None
