"""`udgs eval-ate` and `udgs eval-render`."""
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .. import dataio, evaluation
from ..constants import ExitCode
from ..errors import DataError, IoFailure

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def register(subparsers) -> None:
    ate = subparsers.add_parser("eval-ate", help="ATE-RMSE between two TUM trajectories")
    ate.add_argument("estimate", type=Path)
    ate.add_argument("groundtruth", type=Path)
    ate.add_argument("--scale", action="store_true", help="Similarity instead of rigid alignment")
    ate.add_argument("--max-dt", type=float, default=0.02)
    ate.add_argument("--strict", action="store_true",
                     help="Fail on collinear estimates instead of aligning by translation only")
    ate.set_defaults(handler=handle_ate)

    rendered = subparsers.add_parser("eval-render", help="PSNR and SSIM over images paired by file name")
    rendered.add_argument("dir_a", type=Path)
    rendered.add_argument("dir_b", type=Path)
    rendered.add_argument("--csv", type=Path, default=None, help="Per-image scores")
    rendered.set_defaults(handler=handle_render)


def handle_ate(args) -> int:
    est = dataio.read_trajectory_tum(args.estimate)
    gt = dataio.read_trajectory_tum(args.groundtruth)
    alignment = evaluation.align_umeyama(est, gt, with_scale=args.scale, max_dt=args.max_dt, strict=args.strict)
    if alignment.degenerate:
        logger.warning("Alignment was degenerate; reported error uses translation-only alignment.")
    logger.info(f"{len(alignment.residuals)} pose pairs, scale {alignment.scale:.6f}")
    print(f"{alignment.rmse:.6f}")
    return ExitCode.OK


def _images(directory: Path) -> dict:
    if not directory.is_dir():
        raise DataError(f"Not a directory: {directory}")
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def handle_render(args) -> int:
    images_a, images_b = _images(args.dir_a), _images(args.dir_b)
    names = sorted(set(images_a) & set(images_b))
    if not names:
        raise DataError(f"No images with matching names in {args.dir_a} and {args.dir_b}")
    rows = []
    for i, name in enumerate(names):
        logger.debug(f"Processing image {i + 1} of {len(names)}: {name}")
        a = dataio.load_rgb(images_a[name])
        b = dataio.load_rgb(images_b[name])
        rows.append({"image": name, "psnr_db": evaluation.psnr(a, b), "ssim": evaluation.ssim(a, b)})
    table = pd.DataFrame(rows)
    finite_psnr = table["psnr_db"][np.isfinite(table["psnr_db"])]
    mean_psnr = float(finite_psnr.mean()) if len(finite_psnr) else float("inf")
    print(f"psnr_db {mean_psnr:.6f}")
    print(f"ssim {float(table['ssim'].mean()):.6f}")
    print("lpips n/a")
    if args.csv is not None:
        try:
            table.to_csv(args.csv, index=False)
        except OSError as exc:
            raise IoFailure(f"Cannot write {args.csv}: {exc}")
    return ExitCode.OK
