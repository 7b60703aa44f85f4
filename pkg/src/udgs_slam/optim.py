# src/udgs_slam/optim.py
"""Adam over named parameter groups with per-group step sizes, plus a tangent-space variant for poses."""
from typing import Dict, Mapping

import numpy as np

from .geometry import SE3Pose, se3_retract


class GroupAdam:
    """
    Adam on flat numpy vectors. Each group carries its own learning rate; state is
    created lazily on the first step. Parameters are updated in place.
    """

    def __init__(self, lrs: Mapping[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.param_groups = [{"name": name, "lr": float(lr)} for name, lr in lrs.items()]
        self.betas = betas
        self.eps = eps
        self.state: Dict[str, Dict[str, np.ndarray]] = {}
        self.step_count = 0

    def lr(self, name: str) -> float:
        for group in self.param_groups:
            if group["name"] == name:
                return group["lr"]
        raise KeyError(name)

    def scale_lr(self, factor: float) -> None:
        for group in self.param_groups:
            group["lr"] *= factor

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        beta1, beta2 = self.betas
        self.step_count += 1
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for group in self.param_groups:
            name = group["name"]
            if name not in grads:
                continue
            p = params[name]
            g = np.asarray(grads[name], dtype=float).reshape(p.shape)
            state = self.state.get(name)
            if state is None or state["m"].shape != p.shape:
                state = self.state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
            state["m"] = beta1 * state["m"] + (1.0 - beta1) * g
            state["v"] = beta2 * state["v"] + (1.0 - beta2) * g * g
            update = (state["m"] / bias1) / (np.sqrt(state["v"] / bias2) + self.eps)
            p -= group["lr"] * update


class PoseAdam:
    """
    Adam on a left-multiplicative pose tangent. Each step maps the moment-normalized
    gradient to an increment xi and retracts: T <- exp(-lr * xi) * T.
    """

    def __init__(self, lr_trans: float, lr_rot: float, betas=(0.9, 0.999), eps: float = 1e-15):
        self.lr = np.array([lr_trans] * 3 + [lr_rot] * 3, dtype=float)
        self.betas = betas
        self.eps = eps
        self.m = np.zeros(6)
        self.v = np.zeros(6)
        self.step_count = 0

    def scale_lr(self, factor: float) -> None:
        self.lr *= factor

    def step(self, pose: SE3Pose, grad: np.ndarray) -> SE3Pose:
        beta1, beta2 = self.betas
        self.step_count += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        m_hat = self.m / (1.0 - beta1 ** self.step_count)
        v_hat = self.v / (1.0 - beta2 ** self.step_count)
        xi = -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if not np.any(xi):
            return pose
        return se3_retract(pose, xi)
