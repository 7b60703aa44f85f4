"""`udgs render`: render a saved map from a given camera pose."""
import logging
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .. import dataio
from ..constants import ExitCode
from ..depth_filter import DepthMap
from ..errors import UsageError
from ..geometry import CameraIntrinsics, SE3Pose
from ..rasterizer import render

logger = logging.getLogger(__name__)


def _floats(text: str, count: int, name: str) -> list:
    parts = text.replace(",", " ").split()
    if len(parts) != count:
        raise UsageError(f"--{name} expects {count} comma-separated numbers, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"--{name} expects numbers, got {text!r}")


def parse_pose(text: str) -> SE3Pose:
    """`tx,ty,tz,qx,qy,qz,qw` camera-to-world (TUM convention) -> world-to-camera pose."""
    values = _floats(text, 7, "pose")
    quat = np.array(values[3:])
    if np.linalg.norm(quat) == 0:
        raise UsageError("--pose quaternion must be non-zero")
    return SE3Pose(Rotation.from_quat(quat).as_matrix(), values[:3]).inverse()


def parse_intrinsics(text: str) -> CameraIntrinsics:
    fx, fy, cx, cy, width, height = _floats(text, 6, "intrinsics")
    try:
        return CameraIntrinsics(fx, fy, cx, cy, int(width), int(height))
    except ValueError as exc:
        raise UsageError(f"--intrinsics: {exc}")


def register(subparsers) -> None:
    parser = subparsers.add_parser("render", help="Render a map.bin snapshot")
    parser.add_argument("map", type=Path)
    parser.add_argument("--pose", required=True, help="tx,ty,tz,qx,qy,qz,qw (camera-to-world)")
    parser.add_argument("--out", type=Path, required=True, help="Output PNG")
    parser.add_argument("--intrinsics", default=None, help="fx,fy,cx,cy,width,height")
    parser.add_argument("--intrinsics-file", type=Path, default=None, help="intrinsics.txt of a sequence")
    parser.add_argument("--depth-out", type=Path, default=None, help="Also write rendered depth (rawf32 or png16)")
    parser.set_defaults(handler=handle)


def handle(args) -> int:
    if args.intrinsics is not None:
        K = parse_intrinsics(args.intrinsics)
    elif args.intrinsics_file is not None:
        K = dataio.read_intrinsics(args.intrinsics_file)
    else:
        K = CameraIntrinsics(*dataio.DEFAULT_INTRINSICS)
    pose = parse_pose(args.pose)
    gmap = dataio.load_map(args.map)
    logger.info(f"Rendering {len(gmap)} splats at {K.width}x{K.height}")
    out = render(gmap, pose, K)
    dataio.write_rgb(out.color_image, args.out)
    if args.depth_out is not None:
        dataio.write_depth(DepthMap(out.depth_image, out.alpha_image > 0.5), args.depth_out)
    return ExitCode.OK
