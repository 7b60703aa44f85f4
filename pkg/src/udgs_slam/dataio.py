# src/udgs_slam/dataio.py
"""
Dataset ingestion (TUM RGB-D layout), depth-map containers, config parsing,
trajectory serialization, map snapshots and run manifests.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import imageio.v3 as iio
import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.spatial.transform import Rotation

from . import __version__
from .constants import DEPTH_MAGIC, MAP_MAGIC, TUM_DEPTH_SCALE, DepthFormat
from .depth_filter import DepthMap
from .errors import (
    BadMagic,
    ConfigTypeError,
    EmptyAssociation,
    InvalidIntrinsics,
    IoFailure,
    MalformedLine,
    MissingIndexFile,
    SizeMismatch,
    UnknownKey,
    UnorderedTimestamps,
    UnreadableFile,
)
from .gaussian_map import SPLAT_RECORD, GaussianMap
from .geometry import CameraIntrinsics, SE3Pose
from .schemas import RunManifest, SlamConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# TUM fr1 defaults, used when the sequence carries no intrinsics.txt
DEFAULT_INTRINSICS = (517.3, 516.5, 318.6, 255.3, 640, 480)


# --- Types ---

@dataclass
class Trajectory:
    """Timestamped poses. Poses are camera-to-world, as in TUM files."""
    timestamps: np.ndarray                   # (N,)
    translations: np.ndarray                 # (N, 3)
    quaternions: np.ndarray                  # (N, 4) qx qy qz qw

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.translations = np.asarray(self.translations, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, timestamps: Sequence[float], poses_cw: Sequence[SE3Pose]) -> "Trajectory":
        """Build from world-to-camera poses; inverts to camera-to-world exactly once."""
        poses_wc = [p.inverse() for p in poses_cw]
        translations = np.array([p.translation for p in poses_wc]).reshape(-1, 3)
        quats = Rotation.from_matrix(np.array([p.rotation for p in poses_wc])).as_quat() if poses_wc else np.zeros((0, 4))
        traj = cls(np.asarray(timestamps, dtype=float), translations, quats)
        traj.check_increasing()
        return traj

    def check_increasing(self) -> None:
        """Raises UnorderedTimestamps unless timestamps strictly increase."""
        bad = np.flatnonzero(np.diff(self.timestamps) <= 0)
        if len(bad):
            i = int(bad[0])
            raise UnorderedTimestamps(
                f"Trajectory timestamps must strictly increase: {self.timestamps[i]:.6f} then {self.timestamps[i + 1]:.6f}"
            )

    def poses_cw(self) -> List[SE3Pose]:
        rotations = Rotation.from_quat(self.quaternions).as_matrix() if len(self) else []
        return [SE3Pose(R, t).inverse() for R, t in zip(rotations, self.translations)]


@dataclass
class SequenceSource:
    root: Path
    rgb: List[Tuple[float, str]]
    depth: List[Tuple[float, str]]
    pairs: List[Tuple[int, int]]                # (rgb index, depth index)
    intrinsics: CameraIntrinsics
    groundtruth: Optional[Trajectory] = None
    depth_scale: float = TUM_DEPTH_SCALE
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def frame_paths(self) -> Iterator[Tuple[float, Path, Path]]:
        for rgb_index, depth_index in self.pairs:
            timestamp, rgb_path = self.rgb[rgb_index]
            _, depth_path = self.depth[depth_index]
            yield timestamp, self.root / rgb_path, self.root / depth_path

    def input_files(self) -> List[Path]:
        files = [path for _, rgb_path, depth_path in self.frame_paths() for path in (rgb_path, depth_path)]
        for name in ("rgb.txt", "depth.txt", "groundtruth.txt", "intrinsics.txt"):
            if (self.root / name).exists():
                files.append(self.root / name)
        return files


# --- TUM index files ---

def read_index_file(path: PathLike, min_fields: int = 2) -> List[Tuple[int, List[str]]]:
    """
    Split non-comment lines into fields, keeping 1-based line numbers. A line with
    too few fields or a non-numeric first field is a MalformedLine.
    """
    path = Path(path)
    if not path.exists():
        raise MissingIndexFile(f"Index file not found: {path}")
    rows = []
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.replace(",", " ").split()
            if len(fields) < min_fields:
                raise MalformedLine(path, line_number, line)
            try:
                float(fields[0])
            except ValueError:
                raise MalformedLine(path, line_number, line)
            rows.append((line_number, fields))
    return rows


def read_file_list(path: PathLike) -> List[Tuple[float, str]]:
    entries = [(float(fields[0]), fields[1]) for _, fields in read_index_file(path)]
    return sorted(entries, key=lambda entry: entry[0])


def associate(first: Sequence[float], second: Sequence[float], max_dt: float = 0.02) -> List[Tuple[int, int]]:
    """
    Greedy one-to-one nearest-neighbour matching of two timestamp lists, closest
    pairs first, keeping pairs with |dt| <= max_dt. Returned in order of `first`.
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    if not len(first) or not len(second):
        return []
    dt = np.abs(first[:, None] - second[None, :])
    candidates = np.argwhere(dt <= max_dt)
    order = np.lexsort((candidates[:, 1], candidates[:, 0], dt[candidates[:, 0], candidates[:, 1]]))
    used_first, used_second = set(), set()
    pairs = []
    for i, j in candidates[order]:
        if i in used_first or j in used_second:
            continue
        used_first.add(i)
        used_second.add(j)
        pairs.append((int(i), int(j)))
    return sorted(pairs)


def read_intrinsics(path: PathLike) -> CameraIntrinsics:
    """`fx fy cx cy width height` on the first non-comment line."""
    rows = read_index_file(path, min_fields=6)
    if not rows:
        raise MalformedLine(path, 1, "")
    line_number, fields = rows[0]
    try:
        fx, fy, cx, cy = (float(v) for v in fields[:4])
        width, height = int(fields[4]), int(fields[5])
    except ValueError:
        raise MalformedLine(path, line_number, " ".join(fields))
    try:
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as exc:
        raise InvalidIntrinsics(f"{path}:{line_number}: {exc}")


def load_tum_sequence(root_dir: PathLike, max_dt: float = 0.02) -> SequenceSource:
    """
    Read a TUM RGB-D style directory: rgb.txt and depth.txt (timestamp path),
    optional groundtruth.txt and intrinsics.txt.

    Raises:
        MissingIndexFile: rgb.txt or depth.txt is absent.
        MalformedLine: a line cannot be parsed.
        EmptyAssociation: no rgb/depth pair lies within max_dt.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise MissingIndexFile(f"Sequence directory not found: {root}")
    rgb = read_file_list(root / "rgb.txt")
    depth = read_file_list(root / "depth.txt")
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], max_dt)
    if not pairs:
        raise EmptyAssociation(f"No rgb/depth pairs within {max_dt} s in {root}")
    dropped = len(rgb) - len(pairs)
    if dropped:
        logger.info(f"Found {dropped} unmatched rgb frames. Dropping.")

    intrinsics_path = root / "intrinsics.txt"
    if intrinsics_path.exists():
        intrinsics = read_intrinsics(intrinsics_path)
    else:
        logger.info("No intrinsics.txt found. Using TUM fr1 defaults.")
        intrinsics = CameraIntrinsics(*DEFAULT_INTRINSICS)

    groundtruth = None
    if (root / "groundtruth.txt").exists():
        groundtruth = read_trajectory_tum(root / "groundtruth.txt")

    logger.info(f"Loaded {len(pairs)} frames from {root}")
    return SequenceSource(root, rgb, depth, pairs, intrinsics, groundtruth, dropped=dropped)


# --- Images and depth ---

def _check_shape(path: PathLike, actual: Tuple[int, ...], expected: Optional[Tuple[int, int]]) -> None:
    if expected is not None and tuple(actual) != tuple(expected):
        raise SizeMismatch(f"{path}: image is {actual[1]}x{actual[0]}, camera expects {expected[1]}x{expected[0]}")


def load_rgb(path: PathLike, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    8-bit RGB (or gray, broadcast) as float64 in [0, 1]. With `shape` given as
    (height, width), any other size is a SizeMismatch.
    """
    try:
        image = iio.imread(path)
    except Exception as exc:
        raise UnreadableFile(f"Cannot read image {path}: {exc}")
    if image.dtype != np.uint8:
        raise UnreadableFile(f"Expected an 8-bit image at {path}, got {image.dtype}")
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    _check_shape(path, image.shape[:2], shape)
    return image[:, :, :3].astype(float) / 255.0


def write_rgb(image: np.ndarray, path: PathLike) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        iio.imwrite(path, data)
    except OSError as exc:
        raise IoFailure(f"Cannot write image {path}: {exc}")


def depth_format_for(path: PathLike) -> DepthFormat:
    return DepthFormat.PNG16 if Path(path).suffix.lower() == ".png" else DepthFormat.RAWF32


def load_depth(path: PathLike, format: Optional[DepthFormat] = None, units_scale: float = TUM_DEPTH_SCALE,
               shape: Optional[Tuple[int, int]] = None) -> DepthMap:
    """
    Read a depth map. png16 values are multiplied by units_scale; rawf32 holds
    meters directly. Zero, NaN and negative values are invalid. With `shape`
    given as (height, width), any other size is a SizeMismatch.

    Raises:
        BadMagic, SizeMismatch, UnreadableFile
    """
    path = Path(path)
    format = DepthFormat(format) if format is not None else depth_format_for(path)
    if format == DepthFormat.PNG16:
        try:
            raw = iio.imread(path)
        except Exception as exc:
            raise UnreadableFile(f"Cannot read depth image {path}: {exc}")
        if raw.ndim != 2 or raw.dtype != np.uint16:
            raise UnreadableFile(f"Expected a 16-bit single-channel image at {path}, got {raw.dtype} {raw.shape}")
        _check_shape(path, raw.shape, shape)
        return DepthMap.from_values(raw.astype(float) * units_scale, units_scale=units_scale)

    try:
        data = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"Cannot read depth file {path}: {exc}")
    header = len(DEPTH_MAGIC) + 8
    if len(data) < header or data[:len(DEPTH_MAGIC)] != DEPTH_MAGIC:
        raise BadMagic(f"{path} is not a {DEPTH_MAGIC.decode()} depth file")
    width, height = struct.unpack("<II", data[len(DEPTH_MAGIC):header])
    expected = header + 4 * width * height
    if len(data) != expected:
        raise SizeMismatch(f"{path}: header says {width}x{height} ({expected} bytes), file has {len(data)} bytes")
    values = np.frombuffer(data, dtype="<f4", offset=header).reshape(height, width)
    _check_shape(path, values.shape, shape)
    return DepthMap.from_values(values.astype(float), units_scale=1.0)


def write_depth(depth: DepthMap, path: PathLike, format: Optional[DepthFormat] = None) -> None:
    """Invalid pixels are written as 0."""
    path = Path(path)
    format = DepthFormat(format) if format is not None else depth_format_for(path)
    values = np.where(depth.valid, depth.values, 0.0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if format == DepthFormat.PNG16:
            scale = depth.units_scale if depth.units_scale != 1.0 else TUM_DEPTH_SCALE
            units = np.round(values / scale)
            iio.imwrite(path, np.clip(units, 0, np.iinfo(np.uint16).max).astype(np.uint16))
        else:
            height, width = values.shape
            with open(path, "wb") as f:
                f.write(DEPTH_MAGIC)
                f.write(struct.pack("<II", width, height))
                f.write(values.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"Cannot write depth file {path}: {exc}")


# --- Trajectories ---

def write_trajectory_tum(traj: Trajectory, path: PathLike) -> None:
    """`timestamp tx ty tz qx qy qz qw`, 6 decimals, one pose per line."""
    traj.check_increasing()
    lines = []
    for timestamp, t, q in zip(traj.timestamps, traj.translations, traj.quaternions):
        q = q / np.linalg.norm(q)
        # + 0.0 turns -0.0 into 0.0
        values = np.array([timestamp, *t, *q]) + 0.0
        lines.append(" ".join(f"{v:.6f}" for v in values) + "\n")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.writelines(lines)
    except OSError as exc:
        raise IoFailure(f"Cannot write trajectory {path}: {exc}")


def read_trajectory_tum(path: PathLike) -> Trajectory:
    rows = read_index_file(path, min_fields=8)
    path = Path(path)
    data = []
    for line_number, fields in rows:
        try:
            data.append([float(v) for v in fields[:8]])
        except ValueError:
            raise MalformedLine(path, line_number, " ".join(fields))
    data = np.array(data).reshape(-1, 8)
    order = np.argsort(data[:, 0], kind="stable")
    data = data[order]
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:8])


# --- Config ---

def _parse_value(raw: str):
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    return raw.strip().strip('"').strip("'")


def _set_dotted(target: dict, key: str, value) -> None:
    parts = key.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UnknownKey(key)
    node[parts[-1]] = value


def _known_keys(model_cls, prefix: str = "") -> dict:
    """Dotted key -> field path for every leaf field, accepting aliases."""
    keys = {}
    for name, info in model_cls.model_fields.items():
        annotation = info.annotation
        public = info.alias or name
        for label in {name, public}:
            dotted = f"{prefix}{label}"
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                keys.update(_known_keys(annotation, prefix=f"{dotted}."))
            else:
                keys[dotted] = f"{prefix}{public}"
    return keys


def parse_config(text: str, source: str = "<config>") -> SlamConfig:
    """
    Parse `key = value` lines (dotted keys for nested sections, `#` comments).

    Raises:
        UnknownKey: a key names no config field.
        ConfigTypeError: a value fails validation; names the key and expected type or range.
    """
    known = _known_keys(SlamConfig)
    values: dict = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise MalformedLine(source, line_number, line)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise UnknownKey(key)
        _set_dotted(values, known[key], _parse_value(raw))
    try:
        return SlamConfig.model_validate(values)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        raise ConfigTypeError(key, error["msg"], f"got {error.get('input')!r}")


def load_config(path: Optional[PathLike]) -> SlamConfig:
    """Missing path means all defaults."""
    if path is None:
        return SlamConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UnreadableFile(f"Cannot read config {path}: {exc}")
    return parse_config(text, source=str(path))


# --- Map snapshot ---

def save_map(gmap: GaussianMap, path: PathLike) -> None:
    """`UDGSMAP1`, u64 splat count, then packed little-endian splat records."""
    records = gmap.to_records()
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAP_MAGIC)
            f.write(struct.pack("<Q", len(records)))
            f.write(records.tobytes())
    except OSError as exc:
        raise IoFailure(f"Cannot write map {path}: {exc}")


def load_map(path: PathLike) -> GaussianMap:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"Cannot read map {path}: {exc}")
    header = len(MAP_MAGIC) + 8
    if len(data) < header or data[:len(MAP_MAGIC)] != MAP_MAGIC:
        raise BadMagic(f"{path} is not a {MAP_MAGIC.decode()} map file")
    (count,) = struct.unpack("<Q", data[len(MAP_MAGIC):header])
    expected = header + count * SPLAT_RECORD.itemsize
    if len(data) != expected:
        raise SizeMismatch(f"{path}: header says {count} splats ({expected} bytes), file has {len(data)} bytes")
    records = np.frombuffer(data, dtype=SPLAT_RECORD, offset=header, count=count)
    return GaussianMap.from_records(records)


# --- Manifest ---

def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(sequence: SequenceSource, cfg: SlamConfig, threads: int,
                   status: str = "ok", message: Optional[str] = None) -> RunManifest:
    hashes = {str(path.relative_to(sequence.root)): file_sha256(path) for path in sequence.input_files()}
    return RunManifest(
        version=__version__,
        created_at=datetime.now(timezone.utc),
        sequence_dir=str(sequence.root),
        config=cfg.model_dump(mode="json", by_alias=True),
        rng_seed=cfg.rng_seed,
        threads=threads,
        input_hashes=hashes,
        status=status,
        message=message,
    )


def write_manifest(manifest: RunManifest, path: PathLike) -> None:
    try:
        Path(path).write_text(manifest.model_dump_json(indent=2))
    except OSError as exc:
        raise IoFailure(f"Cannot write manifest {path}: {exc}")
