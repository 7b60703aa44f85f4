from enum import Enum


class DepthFormat(str, Enum):
    """
    On-disk depth map encodings accepted by the loaders.
    """
    PNG16 = 'png16'    # 16-bit single channel, scaled by units_scale
    RAWF32 = 'rawf32'  # UDGSDEP1 container, float32 meters


class FilterMode(str, Enum):
    """
    Region over which depth quartiles are computed.
    """
    GLOBAL = 'global'
    PATCH = 'patch'


class ParameterGroup(str, Enum):
    """
    Canonical names of the optimizable splat parameter groups, in record order.
    """
    MU_W = 'mu_w'
    LOG_SCALE = 'log_scale'
    ROT_Q = 'rot_q'
    COLOR = 'color'
    LOGIT_OPACITY = 'logit_opacity'


# Components per splat for each parameter group
GROUP_WIDTHS = {
    ParameterGroup.MU_W: 3,
    ParameterGroup.LOG_SCALE: 3,
    ParameterGroup.ROT_Q: 4,
    ParameterGroup.COLOR: 3,
    ParameterGroup.LOGIT_OPACITY: 1,
}


class ExitCode(int, Enum):
    OK = 0
    USAGE = 1
    DATA = 2
    TRACKING_DIVERGED = 3


MAP_MAGIC = b"UDGSMAP1"
DEPTH_MAGIC = b"UDGSDEP1"

# TUM convention: 5000 units per meter in 16-bit depth PNGs
TUM_DEPTH_SCALE = 1.0 / 5000.0
