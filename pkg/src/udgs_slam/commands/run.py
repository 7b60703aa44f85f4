"""`udgs run`: full SLAM over a sequence directory."""
import logging
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .. import dataio, evaluation
from ..constants import ExitCode
from ..errors import TrackingDiverged, TooFewPoses, TooSmall
from ..rasterizer import render
from ..schemas import MetricsRow, SlamConfig
from ..settings import get_thread_count
from ..slam import Frame, RunResult, run as run_slam

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="Track and map a TUM-layout sequence")
    parser.add_argument("sequence_dir", type=Path)
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.add_argument("--max-dt", type=float, default=0.02, help="rgb/depth association tolerance (s)")
    parser.add_argument("--max-frames", type=int, default=None)
    parser.add_argument("--init-from-gt", action="store_true",
                        help="Start from the first ground-truth pose instead of the identity")
    parser.add_argument("--eval-on", choices=["frames", "keyframes"], default="frames",
                        help="Poses used for ATE-RMSE")
    parser.add_argument("--scale", action="store_true", help="Similarity instead of rigid alignment")
    parser.add_argument("--save-renders", action="store_true", help="Write a render per keyframe")
    parser.set_defaults(handler=handle)


def iter_frames(sequence: dataio.SequenceSource, limit: Optional[int] = None) -> Iterator[Frame]:
    K = sequence.intrinsics
    for index, (timestamp, rgb_path, depth_path) in enumerate(sequence.frame_paths()):
        if limit is not None and index >= limit:
            return
        yield Frame(
            index=index,
            timestamp=timestamp,
            rgb=dataio.load_rgb(rgb_path, shape=(K.height, K.width)),
            depth=dataio.load_depth(depth_path, units_scale=sequence.depth_scale, shape=(K.height, K.width)),
        )


def write_outputs(result: RunResult, sequence: dataio.SequenceSource, cfg: SlamConfig, args,
                  status: str = "ok", message: Optional[str] = None) -> None:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_trajectory_tum(dataio.Trajectory.from_poses(result.timestamps, result.poses), out / "trajectory.txt")
    dataio.write_trajectory_tum(
        dataio.Trajectory.from_poses([kf.timestamp for kf in result.keyframes], [kf.pose for kf in result.keyframes]),
        out / "keyframes.txt",
    )
    result.diagnostics_table().to_csv(out / "diagnostics.csv", index=False)
    if result.gmap is not None:
        dataio.save_map(result.gmap, out / "map.bin")
    manifest = dataio.build_manifest(sequence, cfg, get_thread_count(), status=status, message=message)
    dataio.write_manifest(manifest, out / "manifest.json")

    if result.gmap is not None and result.keyframes:
        metrics = compute_metrics(result, sequence, cfg, args)
        evaluation.write_metrics([metrics], out / "metrics.csv")


def compute_metrics(result: RunResult, sequence: dataio.SequenceSource, cfg: SlamConfig, args) -> MetricsRow:
    K = sequence.intrinsics
    psnrs, ssims = [], []
    for kf in result.keyframes:
        rendered = render(result.gmap, kf.pose, K, cfg.render)
        psnrs.append(evaluation.psnr(np.clip(rendered.color_image, 0.0, 1.0), kf.rgb))
        try:
            ssims.append(evaluation.ssim(np.clip(rendered.color_image, 0.0, 1.0), kf.rgb))
        except TooSmall:
            pass
        if args.save_renders:
            dataio.write_rgb(rendered.color_image, args.out / "renders" / f"{kf.frame_index:06d}.png")
    finite = [p for p in psnrs if np.isfinite(p)]

    ate, scale = None, 1.0
    if sequence.groundtruth is not None:
        if args.eval_on == "keyframes":
            est = dataio.Trajectory.from_poses([kf.timestamp for kf in result.keyframes], [kf.pose for kf in result.keyframes])
        else:
            est = dataio.Trajectory.from_poses(result.timestamps, result.poses)
        try:
            alignment = evaluation.align_umeyama(est, sequence.groundtruth, with_scale=args.scale, max_dt=args.max_dt)
            ate, scale = alignment.rmse, alignment.scale
            logger.info(f"ATE-RMSE ({args.eval_on}): {ate:.6f} m")
        except TooFewPoses as exc:
            logger.warning(f"Skipping ATE-RMSE: {exc}")

    return MetricsRow(
        sequence=sequence.root.name,
        ate_rmse_m=ate,
        psnr_db=float(np.mean(finite)) if finite else None,
        ssim=float(np.mean(ssims)) if ssims else None,
        frames=len(result.poses),
        keyframes=len(result.keyframes),
        aligned_scale=scale,
        evaluated_on=args.eval_on,
    )


def handle(args) -> int:
    cfg = dataio.load_config(args.config)
    sequence = dataio.load_tum_sequence(args.sequence_dir, args.max_dt)
    total = len(sequence) if args.max_frames is None else min(len(sequence), args.max_frames)

    initial_pose = None
    if args.init_from_gt and sequence.groundtruth is not None:
        first_stamp = next(sequence.frame_paths())[0]
        nearest = int(np.argmin(np.abs(sequence.groundtruth.timestamps - first_stamp)))
        initial_pose = sequence.groundtruth.poses_cw()[nearest]

    logger.info(f"Running on {total} frames with {get_thread_count()} thread(s), seed {cfg.rng_seed}")
    try:
        result = run_slam(iter_frames(sequence, args.max_frames), sequence.intrinsics, cfg,
                          initial_pose=initial_pose, total_frames=total)
    except TrackingDiverged as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            write_outputs(partial, sequence, cfg, args, status="tracking_diverged", message=str(exc))
        raise
    write_outputs(result, sequence, cfg, args)
    logger.info(f"Wrote outputs to {args.out}")
    return ExitCode.OK
