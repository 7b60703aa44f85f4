"""`udgs synth`: write a synthetic orbit sequence in TUM layout."""
import logging
from pathlib import Path

import numpy as np

from .. import synth
from ..constants import ExitCode
from ..errors import UsageError
from ..schemas import SceneSpec

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="Render a synthetic RGB-D orbit around a random splat scene")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n-splats", type=int, default=200)
    parser.add_argument("--extent", type=float, default=2.0, help="Scene cube edge (m)")
    parser.add_argument("--frames", type=int, default=50)
    parser.add_argument("--radius", type=float, default=3.0, help="Orbit radius (m)")
    parser.add_argument("--arc-degrees", type=float, default=360.0, help="Angle swept by the orbit")
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--height", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tail-fraction", type=float, default=0.0, help="Fraction of depth pixels to corrupt")
    parser.add_argument("--tail-scale", type=float, default=5.0, help="Largest corruption factor")
    parser.set_defaults(handler=handle)


def handle(args) -> int:
    if args.n_splats < 1 or args.frames < 1:
        raise UsageError("--n-splats and --frames must be at least 1")
    if args.radius <= 0 or args.extent <= 0:
        raise UsageError("--radius and --extent must be positive")
    if not 0.0 <= args.tail_fraction <= 1.0:
        raise UsageError("--tail-fraction must lie in [0, 1]")

    scene = synth.make_scene(SceneSpec(n_splats=args.n_splats, extent=args.extent, seed=args.seed))
    poses = synth.make_orbit(args.radius, args.frames, arc_radians=np.radians(args.arc_degrees))
    K = synth.default_intrinsics(args.width, args.height)
    frames = synth.synth_frames(scene, poses, K)
    if args.tail_fraction > 0:
        for frame in frames:
            frame.depth, _ = synth.corrupt_depth(frame.depth, args.tail_fraction, args.tail_scale,
                                                 seed=args.seed + frame.index)
    synth.write_sequence(args.out_dir, frames, poses, K)
    logger.info(f"Wrote {len(frames)} frames to {args.out_dir}")
    return ExitCode.OK
