# src/udgs_slam/errors.py
from .constants import ExitCode


class UdgsError(Exception):
    """
    Base class for every error the engine raises on purpose.
    `exit_code` is what the CLI returns when the error reaches it.
    """
    exit_code = ExitCode.DATA


class UsageError(UdgsError):
    exit_code = ExitCode.USAGE


# --- Geometry ---

class BehindCamera(UdgsError):
    """The point lies at or in front of the near plane; callers cull it."""

    def __init__(self, z: float, z_min: float):
        super().__init__(f"Point depth {z:.6g} m is not beyond the near plane z_min={z_min:.6g} m")
        self.z = z
        self.z_min = z_min


# --- Data errors (exit 2) ---

class DataError(UdgsError):
    exit_code = ExitCode.DATA


class MissingIndexFile(DataError):
    pass


class InvalidIntrinsics(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, path, line_number: int, line: str):
        super().__init__(f"{path}:{line_number}: malformed line {line.strip()!r}")
        self.path = path
        self.line_number = line_number


class EmptyAssociation(DataError):
    pass


class BadMagic(DataError):
    pass


class SizeMismatch(DataError):
    pass


class UnreadableFile(DataError):
    pass


class IoFailure(DataError):
    pass


class UnknownKey(DataError):
    def __init__(self, key: str):
        super().__init__(f"Unknown config key: {key}")
        self.key = key


class ConfigTypeError(DataError):
    def __init__(self, key: str, expected: str, detail: str = ""):
        message = f"Invalid value for config key '{key}': expected {expected}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.key = key
        self.expected = expected


class EmptyDepth(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnorderedTimestamps(DataError):
    pass


class TooFewPoses(DataError):
    pass


class DegenerateConfiguration(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class TooSmall(DataError):
    pass


# --- Tracking ---

class TrackingDiverged(UdgsError):
    exit_code = ExitCode.TRACKING_DIVERGED

    def __init__(self, frame_index: int, initial_loss: float, final_loss: float):
        super().__init__(
            f"Tracking diverged at frame {frame_index}: "
            f"loss {initial_loss:.6g} -> {final_loss:.6g}"
        )
        self.frame_index = frame_index
        self.initial_loss = initial_loss
        self.final_loss = final_loss
