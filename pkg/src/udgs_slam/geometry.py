# src/udgs_slam/geometry.py
"""
SE(3)/SO(3) Lie-group operations, the pinhole camera and the projection
Jacobians used by the rasterizer backward pass.

Poses are world-to-camera (T_CW). Updates are left-multiplicative:
retract(T, xi) = exp(xi) * T, with xi ordered (rho, phi).
"""
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import BehindCamera

SMALL_ANGLE = 1e-8
DEFAULT_Z_MIN = 0.01


# --- Value types ---

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("fx and fy must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Tangent6:
    """se(3) increment: rho translational (m), phi rotational (rad)."""
    rho: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.rho, dtype=float), np.asarray(self.phi, dtype=float)])

    @classmethod
    def from_vector(cls, xi) -> "Tangent6":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(rho=xi[:3].copy(), phi=xi[3:].copy())


TangentLike = Union[Tangent6, np.ndarray, list, tuple]


def _as_xi(xi: TangentLike) -> np.ndarray:
    if isinstance(xi, Tangent6):
        return xi.vector
    return np.asarray(xi, dtype=float).reshape(6)


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid world-to-camera transform x_c = R x_w + t."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(rotation=T[:3, :3].copy(), translation=T[:3, 3].copy())

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self * other (apply other first)."""
        return SE3Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into this frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))


# --- SO(3) ---

def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == a x b."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula with a Taylor branch below SMALL_ANGLE."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)          # sin(theta) * axis
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)   # cos(theta)
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        # R ~ I + skew(phi)
        return w * (1.0 + theta * theta / 6.0)
    if s < 1e-6:
        # theta ~ pi: recover the axis from the symmetric part, sign from w
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if s > 0 and axis @ w < 0:
            axis = -axis
        return theta * axis
    return (theta / s) * w


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3)
            + ((1.0 - np.cos(theta)) / theta2) * K
            + ((theta - np.sin(theta)) / (theta2 * theta)) * (K @ K))


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    coeff = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta2
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


# --- SE(3) ---

def se3_exp(xi: TangentLike) -> SE3Pose:
    xi = _as_xi(xi)
    rho, phi = xi[:3], xi[3:]
    return SE3Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(P: SE3Pose) -> np.ndarray:
    phi = so3_log(P.rotation)
    rho = so3_left_jacobian_inv(phi) @ P.translation
    return np.concatenate([rho, phi])


def se3_retract(P: SE3Pose, xi: TangentLike) -> SE3Pose:
    """Left-multiplicative update exp(xi) * P, re-orthonormalized."""
    updated = se3_exp(xi).compose(P)
    return SE3Pose(orthonormalize(updated.rotation), updated.translation)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (SVD projection), det +1."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


# --- Pinhole camera ---

def project(mu_c, K: CameraIntrinsics, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    x, y, z = np.asarray(mu_c, dtype=float).reshape(3)
    if z <= z_min:
        raise BehindCamera(z, z_min)
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def projection_jacobian(mu_c, K: CameraIntrinsics, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    """d project / d mu_c (2x3)."""
    x, y, z = np.asarray(mu_c, dtype=float).reshape(3)
    if z <= z_min:
        raise BehindCamera(z, z_min)
    return np.array([[K.fx / z, 0.0, -K.fx * x / (z * z)],
                     [0.0, K.fy / z, -K.fy * y / (z * z)]])


def point_pose_jacobian(mu_c) -> np.ndarray:
    """d mu_c / d xi for mu_c' = exp(xi) mu_c at xi = 0: [I | -skew(mu_c)]."""
    J = np.zeros((3, 6))
    J[:, :3] = np.eye(3)
    J[:, 3:] = -skew(mu_c)
    return J


def unproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel (u, v) at camera depth z into the camera frame."""
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def unproject_many(u: np.ndarray, v: np.ndarray, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    depth = np.asarray(depth, dtype=float)
    return np.stack([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth], axis=-1)


def project_many(mu_c: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection without near-plane checks; caller masks z <= z_min."""
    z = mu_c[:, 2]
    return np.stack([K.fx * mu_c[:, 0] / z + K.cx, K.fy * mu_c[:, 1] / z + K.cy], axis=-1)


def projection_jacobian_many(mu_c: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    J = np.zeros((len(mu_c), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / (z * z)
    return J


# --- Quaternions (w, x, y, z) ---

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N, 3, 3) from quaternions (N, 4); quaternions are normalized first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternions given dL/dR (N, 3, 3)."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0]
              - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # through the normalization q / |q|
    radial = np.sum(dqn * qn, axis=-1, keepdims=True)
    return (dqn - radial * qn) / norm
