"""`udgs filter-depth`: IQR-filter a single depth map."""
import logging
from pathlib import Path

from pydantic import ValidationError

from .. import dataio
from ..constants import ExitCode, FilterMode
from ..depth_filter import depth_stats, histogram_report, iqr_filter
from ..errors import EmptyDepth, IoFailure, UsageError
from ..schemas import DepthFilterConfig

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("filter-depth", help="Invalidate IQR outliers in a depth map")
    parser.add_argument("input", type=Path, help="png16 or rawf32 depth file")
    parser.add_argument("output", type=Path, help="Filtered depth file; invalid pixels are written as 0")
    parser.add_argument("--window", type=int, default=16, help="Patch size (px)")
    parser.add_argument("--k", type=float, default=1.5, help="Tukey fence multiplier")
    parser.add_argument("--mode", choices=[m.value for m in FilterMode], default=FilterMode.PATCH.value)
    parser.add_argument("--min-samples", type=int, default=16)
    parser.add_argument("--units-scale", type=float, default=None, help="Meters per png16 unit")
    parser.add_argument("--report", type=Path, default=None, help="CSV of raw and filtered depth histograms")
    parser.add_argument("--bins", type=int, default=50)
    parser.set_defaults(handler=handle)


def handle(args) -> int:
    try:
        cfg = DepthFilterConfig(window=args.window, k=args.k, mode=args.mode, min_samples=args.min_samples)
    except ValidationError as exc:
        raise UsageError(f"Invalid filter settings: {exc.errors()[0]['msg']}")
    kwargs = {} if args.units_scale is None else {"units_scale": args.units_scale}
    raw = dataio.load_depth(args.input, **kwargs)
    filtered = iqr_filter(raw, cfg)
    dataio.write_depth(filtered, args.output)

    removed = int(raw.valid.sum() - filtered.valid.sum())
    logger.info(f"Invalidated {removed} of {int(raw.valid.sum())} valid pixels.")
    try:
        before, after = depth_stats(raw), depth_stats(filtered)
        logger.info(f"Skewness {before.skewness:.3f} -> {after.skewness:.3f}, "
                    f"median {before.median:.3f} m -> {after.median:.3f} m")
    except EmptyDepth as exc:
        logger.warning(str(exc))

    if args.report is not None:
        try:
            histogram_report(raw, filtered, bins=args.bins).to_csv(args.report, index=False)
        except OSError as exc:
            raise IoFailure(f"Cannot write report {args.report}: {exc}")
        logger.info(f"Wrote histogram report to {args.report}")
    return ExitCode.OK
