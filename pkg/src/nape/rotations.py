"""Rotation parameterizations: axis-angle, rotation matrices, intrinsic XYZ Euler.

Joints optimize in axis-angle (singularity-free near rest); Euler angles are
used only against the anatomical limits table, with axes interpreted as
x = flexion/extension, y = lateral bending, z = axial rotation.
"""

from __future__ import annotations

import numpy as np
import torch

GIMBAL_EPS = 1e-6
_SAFE = 1e-12


class GimbalLockError(ValueError):
    pass


def axis_angle_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, batched over leading dims: (..., 3) -> (..., 3, 3).

    Exact identity at r = 0 (the skew term vanishes, so R == I bitwise).
    """
    angle_sq = (r * r).sum(-1, keepdim=True)
    angle = torch.sqrt(angle_sq + _SAFE**2)
    sin_term = torch.sin(angle) / angle
    cos_term = (1.0 - torch.cos(angle)) / (angle_sq + _SAFE**2)
    zero = torch.zeros_like(r[..., 0])
    k = torch.stack(
        [
            zero, -r[..., 2], r[..., 1],
            r[..., 2], zero, -r[..., 0],
            -r[..., 1], r[..., 0], zero,
        ],
        dim=-1,
    ).reshape(r.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(k.shape)
    return eye + sin_term[..., None] * k + cos_term[..., None] * (k @ k)


def matrix_to_axis_angle(mat: np.ndarray) -> np.ndarray:
    """Principal-branch axis-angle from a rotation matrix, (..., 3, 3) -> (..., 3)."""
    m = np.asarray(mat, dtype=np.float64)
    trace = np.clip(m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2], -1.0, 3.0)
    angle = np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0))
    axis_raw = np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )
    sin_a = np.linalg.norm(axis_raw, axis=-1) / 2.0
    out = np.zeros(m.shape[:-2] + (3,))
    regular = sin_a > 1e-9
    if np.any(regular):
        scale = (angle[regular] / (2.0 * sin_a[regular]))[..., None]
        out[regular] = axis_raw[regular] * scale
    near_pi = (~regular) & (angle > 1.0)
    if np.any(near_pi):
        # axis from the dominant column of (M + I) / 2
        for idx in np.argwhere(near_pi):
            key = tuple(idx)
            b = (m[key] + np.eye(3)) / 2.0
            col = np.argmax(np.diag(b))
            axis = b[:, col] / np.sqrt(max(b[col, col], 1e-300))
            out[key] = axis * angle[key]
    return out


def euler_xyz_to_matrix(euler: torch.Tensor) -> torch.Tensor:
    """Intrinsic X-Y-Z Euler to rotation matrix: R = Rx(a) @ Ry(b) @ Rz(c)."""
    a, b, c = euler[..., 0], euler[..., 1], euler[..., 2]
    ca, sa = torch.cos(a), torch.sin(a)
    cb, sb = torch.cos(b), torch.sin(b)
    cc, sc = torch.cos(c), torch.sin(c)
    row0 = torch.stack([cb * cc, -cb * sc, sb], dim=-1)
    row1 = torch.stack([ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb], dim=-1)
    row2 = torch.stack([sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def matrix_to_euler_xyz(mat: torch.Tensor) -> torch.Tensor:
    """Rotation matrix to intrinsic X-Y-Z Euler angles (differentiable)."""
    r02 = mat[..., 0, 2].clamp(-1.0, 1.0)
    b = torch.asin(r02)
    a = torch.atan2(-mat[..., 1, 2], mat[..., 2, 2])
    c = torch.atan2(-mat[..., 0, 1], mat[..., 0, 0])
    return torch.stack([a, b, c], dim=-1)


def axis_angle_to_euler(r: np.ndarray, *, strict: bool = True) -> np.ndarray:
    """Axis-angle (|r| < pi) to intrinsic XYZ Euler; flags gimbal lock when strict."""
    r_t = torch.as_tensor(np.asarray(r, dtype=np.float64))
    mat = axis_angle_to_matrix(r_t)
    euler = matrix_to_euler_xyz(mat).numpy()
    if strict:
        mid = np.abs(np.abs(np.atleast_2d(euler.reshape(-1, 3))[:, 1]) - np.pi / 2.0)
        if np.any(mid < GIMBAL_EPS):
            raise GimbalLockError("middle Euler angle within 1e-6 of pi/2")
    return euler


def euler_to_axis_angle(euler: np.ndarray) -> np.ndarray:
    e_t = torch.as_tensor(np.asarray(euler, dtype=np.float64))
    return matrix_to_axis_angle(euler_xyz_to_matrix(e_t).numpy())


def axis_angle_to_matrix_np(r: np.ndarray) -> np.ndarray:
    return axis_angle_to_matrix(torch.as_tensor(np.asarray(r, dtype=np.float64))).numpy()
