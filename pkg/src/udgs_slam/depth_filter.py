# src/udgs_slam/depth_filter.py
"""
IQR (Tukey fence) filtering of ingested depth maps. Values are never modified;
outliers are only marked invalid.
"""
import logging
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .constants import FilterMode
from .errors import EmptyDepth
from .schemas import DepthFilterConfig

logger = logging.getLogger(__name__)


@dataclass
class DepthMap:
    """Per-pixel metric depth with a validity mask."""
    values: np.ndarray
    valid: np.ndarray
    units_scale: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values) & (self.values > 0)

    @classmethod
    def from_values(cls, values: np.ndarray, units_scale: float = 1.0) -> "DepthMap":
        """Valid wherever the value is finite and positive."""
        values = np.asarray(values, dtype=float)
        return cls(values=values, valid=np.ones(values.shape, dtype=bool), units_scale=units_scale)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def valid_values(self) -> np.ndarray:
        return self.values[self.valid]

    def median(self) -> float:
        vals = self.valid_values()
        if not len(vals):
            raise EmptyDepth("Depth map has no valid pixels")
        return float(np.median(vals))


@dataclass
class DepthStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    skewness: float
    valid_fraction: float


def _regions(shape: Tuple[int, int], cfg: DepthFilterConfig) -> Iterator[Tuple[slice, slice]]:
    H, W = shape
    if FilterMode(cfg.mode) == FilterMode.GLOBAL:
        yield slice(0, H), slice(0, W)
        return
    for y0 in range(0, H, cfg.window):
        for x0 in range(0, W, cfg.window):
            yield slice(y0, min(y0 + cfg.window, H)), slice(x0, min(x0 + cfg.window, W))


def tukey_fences(values: np.ndarray, k: float) -> Tuple[float, float]:
    """[Q1 - k IQR, Q3 + k IQR] with linear-interpolation quantiles."""
    q1, q3 = np.quantile(values, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return q1 - k * iqr, q3 + k * iqr


def iqr_filter(depth: DepthMap, cfg: Optional[DepthFilterConfig] = None) -> DepthMap:
    """
    Mark depth outliers invalid, per region: the whole image in global mode, or
    non-overlapping cfg.window patches in patch mode. Regions with fewer than
    cfg.min_samples valid pixels pass through unfiltered.

    Args:
        depth: Input depth map; its mask is respected (invalid stays invalid).
        cfg: Filter configuration.

    Returns:
        A new DepthMap sharing the same values with a tightened mask.
    """
    cfg = cfg or DepthFilterConfig()
    valid = depth.valid.copy()
    for rows, cols in _regions(depth.shape, cfg):
        region_valid = depth.valid[rows, cols]
        if region_valid.sum() < cfg.min_samples:
            continue
        region_values = depth.values[rows, cols]
        lo, hi = tukey_fences(region_values[region_valid], cfg.k)
        outlier = region_valid & ((region_values < lo) | (region_values > hi))
        valid[rows, cols] &= ~outlier
    removed = int(depth.valid.sum() - valid.sum())
    logger.debug(f"IQR filter ({FilterMode(cfg.mode).value}, k={cfg.k}) invalidated {removed} pixels.")
    return replace(depth, valid=valid)


def depth_stats(depth: DepthMap) -> DepthStats:
    vals = depth.valid_values()
    if len(vals) < 2:
        raise EmptyDepth(f"Need at least 2 valid pixels for statistics, found {len(vals)}")
    q1, median, q3 = np.quantile(vals, [0.25, 0.5, 0.75], method="linear")
    skewness = 0.0 if np.ptp(vals) == 0 else float(stats.skew(vals))
    return DepthStats(
        min=float(vals.min()),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(vals.max()),
        skewness=skewness,
        valid_fraction=float(depth.valid.mean()),
    )


def depth_histogram(depth: DepthMap, bins: int = 50, edges: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Histogram of valid depths as a table of bin edges and counts."""
    vals = depth.valid_values()
    if edges is None:
        edges = np.histogram_bin_edges(vals, bins=bins) if len(vals) else np.linspace(0.0, 1.0, bins + 1)
    counts, edges = np.histogram(vals, bins=edges)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})


def histogram_report(raw: DepthMap, filtered: DepthMap, bins: int = 50) -> pd.DataFrame:
    """Raw and filtered histograms over the raw map's bin edges, side by side."""
    table = depth_histogram(raw, bins=bins)
    edges = np.append(table["bin_left"].to_numpy(), table["bin_right"].iloc[-1])
    table = table.rename(columns={"count": "raw_count"})
    table["filtered_count"] = depth_histogram(filtered, edges=edges)["count"].to_numpy()
    return table
