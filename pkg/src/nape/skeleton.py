"""Cervical kinematic chain: skeleton, forward kinematics, linear blend
skinning, rotation limits, pose regularizers, collision penalty, joint
regressor, and vertebra template alignment from landmark pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .mesh import vertex_normals
from .rotations import axis_angle_to_matrix, matrix_to_euler_xyz

JOINT_NAMES = ("c7-t1", "c6-c7", "c5-c6", "c4-c5", "c3-c4", "c2-c3", "c1-c2", "o-c1")
AXIS_NAMES = ("flexion", "lateral", "axial")
NUM_JOINTS = len(JOINT_NAMES)

# Per-joint Euler limits in degrees (flexion min/max, lateral, axial), a
# conservative per-vertebra split of total cervical range of motion. Values
# are configuration defaults; every consumer accepts an arbitrary table.
DEFAULT_LIMITS_DEG = {
    "c7-t1": ((-8.0, 10.0), (-6.0, 6.0), (-5.0, 5.0)),
    "c6-c7": ((-10.0, 15.0), (-8.0, 8.0), (-7.0, 7.0)),
    "c5-c6": ((-12.0, 18.0), (-9.0, 9.0), (-8.0, 8.0)),
    "c4-c5": ((-12.0, 18.0), (-10.0, 10.0), (-10.0, 10.0)),
    "c3-c4": ((-10.0, 15.0), (-10.0, 10.0), (-10.0, 10.0)),
    "c2-c3": ((-8.0, 12.0), (-9.0, 9.0), (-6.0, 6.0)),
    "c1-c2": ((-10.0, 15.0), (-5.0, 5.0), (-35.0, 35.0)),
    "o-c1": ((-10.0, 25.0), (-8.0, 8.0), (-10.0, 10.0)),
}


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    """Single chain rooted at c7-t1; rest_positions in millimeters."""

    rest_positions: np.ndarray
    joint_names: tuple[str, ...] = JOINT_NAMES
    parents: tuple[int, ...] = tuple(range(-1, NUM_JOINTS - 1))

    def __post_init__(self):
        pos = np.ascontiguousarray(self.rest_positions, dtype=np.float64)
        object.__setattr__(self, "rest_positions", pos)
        k = len(self.joint_names)
        if pos.shape != (k, 3):
            raise SkeletonError(f"rest_positions must be ({k}, 3), got {pos.shape}")
        if len(self.parents) != k or self.parents[0] != -1:
            raise SkeletonError("parents must encode a chain rooted at the first joint")
        for i, p in enumerate(self.parents[1:], start=1):
            if p != i - 1:
                raise SkeletonError("parents must form a single chain (each joint follows its predecessor)")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)


@dataclass(frozen=True)
class RotationLimits:
    """Per joint and Euler axis (min <= 0 <= max). Degrees are the stored
    source of truth (the table file format); radians are derived once."""

    bounds_deg: np.ndarray
    joint_names: tuple[str, ...] = JOINT_NAMES
    bounds: np.ndarray = None  # radians, derived

    def __post_init__(self):
        deg = np.ascontiguousarray(self.bounds_deg, dtype=np.float64)
        object.__setattr__(self, "bounds_deg", deg)
        if deg.shape != (len(self.joint_names), 3, 2):
            raise SkeletonError(f"bounds must be ({len(self.joint_names)}, 3, 2), got {deg.shape}")
        if np.any(deg[..., 0] > 0.0) or np.any(deg[..., 1] < 0.0):
            raise SkeletonError("each limit must satisfy min <= 0 <= max")
        object.__setattr__(self, "bounds", np.deg2rad(deg))


def default_limits() -> RotationLimits:
    table = np.array([[list(ax) for ax in DEFAULT_LIMITS_DEG[j]] for j in JOINT_NAMES])
    return RotationLimits(bounds_deg=table)


def load_limits(path: str | Path, joint_names: tuple[str, ...] = JOINT_NAMES) -> RotationLimits:
    """Parse the plain-text table: one ``joint axis min_deg max_deg`` per line."""
    table = np.full((len(joint_names), 3, 2), np.nan)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise SkeletonError(f"{path}:{lineno}: expected 'joint axis min max'")
        joint, axis, lo, hi = parts
        if joint not in joint_names:
            raise SkeletonError(f"{path}:{lineno}: unknown joint {joint!r}")
        if axis not in AXIS_NAMES:
            raise SkeletonError(f"{path}:{lineno}: unknown axis {axis!r}")
        table[joint_names.index(joint), AXIS_NAMES.index(axis)] = (float(lo), float(hi))
    if np.isnan(table).any():
        raise SkeletonError(f"{path}: incomplete limits table")
    return RotationLimits(bounds_deg=table, joint_names=joint_names)


def save_limits(limits: RotationLimits, path: str | Path) -> None:
    lines = []
    for j, joint in enumerate(limits.joint_names):
        for a, axis in enumerate(AXIS_NAMES):
            lo, hi = limits.bounds_deg[j, a]
            lines.append(f"{joint} {axis} {lo:.17g} {hi:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def validate_pose(theta: np.ndarray, n_joints: int = NUM_JOINTS) -> np.ndarray:
    t = np.asarray(theta, dtype=np.float64)
    if t.shape != (n_joints, 3):
        raise SkeletonError(f"pose must be ({n_joints}, 3), got {t.shape}")
    mag = np.linalg.norm(t, axis=1)
    if np.any(mag >= np.pi):
        raise SkeletonError("rotation magnitude must stay below pi (principal branch)")
    return t


def validate_weights(weights: np.ndarray, n_vertices: int, n_joints: int, max_influences: int = 4) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_vertices, n_joints):
        raise SkeletonError(f"weights must be ({n_vertices}, {n_joints}), got {w.shape}")
    if np.any(w < 0):
        raise SkeletonError("skinning weights must be non-negative")
    sums = w.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise SkeletonError("skinning weight rows must sum to 1 within 1e-6")
    if np.any((w > 0).sum(axis=1) > max_influences):
        raise SkeletonError(f"rows must have at most {max_influences} nonzero weights")
    return w


# --- forward kinematics and skinning -------------------------------------


def fk_torch(rest: torch.Tensor, theta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """World transforms for a chain: rest (K, 3), theta (..., K, 3).

    Each joint rotates about its rest position in its parent's frame.
    Returns rotations (..., K, 3, 3) and translations (..., K, 3).
    """
    k = rest.shape[0]
    local_r = axis_angle_to_matrix(theta)  # (..., K, 3, 3)
    local_t = rest - (local_r @ rest[..., None]).squeeze(-1)  # p - R p
    world_r = [local_r[..., 0, :, :]]
    world_t = [local_t[..., 0, :]]
    for j in range(1, k):
        world_r.append(world_r[j - 1] @ local_r[..., j, :, :])
        world_t.append(
            (world_r[j - 1] @ local_t[..., j, :, None]).squeeze(-1) + world_t[j - 1]
        )
    return torch.stack(world_r, dim=-3), torch.stack(world_t, dim=-2)


def forward_kinematics(skel: Skeleton, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World rigid transforms (rotations (K, 3, 3), translations (K, 3)) per joint."""
    t = validate_pose(theta, skel.n_joints)
    r_w, t_w = fk_torch(torch.from_numpy(skel.rest_positions), torch.from_numpy(t))
    return r_w.numpy(), t_w.numpy()


def posed_joints(skel: Skeleton, theta: np.ndarray) -> np.ndarray:
    """Joint positions after applying the pose."""
    r_w, t_w = forward_kinematics(skel, theta)
    return np.einsum("kij,kj->ki", r_w, skel.rest_positions) + t_w


def lbs_torch(
    verts: torch.Tensor,
    weights: torch.Tensor,
    world_r: torch.Tensor,
    world_t: torch.Tensor,
) -> torch.Tensor:
    """Delta-form linear blend skinning: v' = v + sum_k w_k (G_k v - v).

    verts (..., N, 3), weights (N, K), world_r (..., K, 3, 3), world_t
    (..., K, 3). Equals the textbook blend whenever rows of W sum to 1, and is
    exactly the identity at rest pose regardless of float rounding in W.
    """
    out = verts
    k = weights.shape[1]
    for j in range(k):
        moved = verts @ world_r[..., j, :, :].transpose(-1, -2) + world_t[..., j, None, :]
        out = out + weights[:, j, None] * (moved - verts)
    return out


def linear_blend_skin(
    verts: np.ndarray, skel: Skeleton, theta: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    v = np.asarray(verts, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise SkeletonError(f"verts must be (N, 3), got {v.shape}")
    w = validate_weights(weights, v.shape[0], skel.n_joints)
    r_w, t_w = fk_torch(torch.from_numpy(skel.rest_positions), torch.from_numpy(validate_pose(theta, skel.n_joints)))
    return lbs_torch(torch.from_numpy(v), torch.from_numpy(w), r_w, t_w).numpy()


# --- pose energies --------------------------------------------------------


def limit_excess_torch(theta: torch.Tensor, bounds: torch.Tensor) -> torch.Tensor:
    """Per-(joint, axis) L1 excess of Euler angles beyond [min, max]."""
    euler = matrix_to_euler_xyz(axis_angle_to_matrix(theta))
    over = torch.clamp(euler - bounds[..., 1], min=0.0)
    under = torch.clamp(bounds[..., 0] - euler, min=0.0)
    return over + under


def rotation_limit_energy(theta: np.ndarray, limits: RotationLimits) -> float:
    t = torch.from_numpy(np.asarray(theta, dtype=np.float64))
    b = torch.from_numpy(limits.bounds)
    return float(limit_excess_torch(t, b).sum())


def adjacent_similarity_torch(theta: torch.Tensor) -> torch.Tensor:
    diff = theta[..., :-1, :] - theta[..., 1:, :]
    return (diff * diff).sum(dim=(-1, -2))


def adjacent_similarity_energy(theta: np.ndarray) -> float:
    return float(adjacent_similarity_torch(torch.from_numpy(np.asarray(theta, dtype=np.float64))).sum())


def capsule_sample_points(rest: torch.Tensor, samples_per_bone: int) -> torch.Tensor:
    """Rest-space sample points along the bone segments of the chain."""
    fractions = torch.linspace(0.0, 1.0, samples_per_bone, dtype=rest.dtype)
    a, b = rest[:-1], rest[1:]
    pts = a[:, None, :] + fractions[None, :, None] * (b - a)[:, None, :]
    return pts.reshape(-1, 3)


def collision_energy_torch(
    skin_verts: torch.Tensor,
    normals: torch.Tensor,
    world_r: torch.Tensor,
    world_t: torch.Tensor,
    rest_points: torch.Tensor,
    bone_of_point: torch.Tensor,
    radius: float,
) -> torch.Tensor:
    """Squared-hinge penalty for spine capsule points breaching the skin.

    Points ride the child joint's transform; penetration depth is the signed
    distance of the inflated point past the nearest skin vertex's tangent
    plane. Zero whenever the whole capsule stays inside.
    """
    r_pts = world_r[..., bone_of_point, :, :]
    moved = (r_pts @ rest_points[..., None]).squeeze(-1) + world_t[..., bone_of_point, :]
    d2 = torch.cdist(moved, skin_verts)
    nearest = d2.argmin(dim=-1)
    anchor = skin_verts[..., nearest, :] if skin_verts.dim() == 2 else torch.gather(
        skin_verts, -2, nearest[..., None].expand(nearest.shape + (3,))
    )
    nrm = normals[..., nearest, :] if normals.dim() == 2 else torch.gather(
        normals, -2, nearest[..., None].expand(nearest.shape + (3,))
    )
    signed = ((moved - anchor) * nrm).sum(-1) + radius
    return torch.clamp(signed, min=0.0).pow(2).sum(-1)


def collision_energy(
    skin_verts: np.ndarray,
    faces: np.ndarray,
    skel: Skeleton,
    theta: np.ndarray,
    *,
    radius: float = 8.0,
    samples_per_bone: int = 4,
) -> float:
    v = torch.from_numpy(np.asarray(skin_verts, dtype=np.float64))
    n = torch.from_numpy(vertex_normals(np.asarray(skin_verts, dtype=np.float64), faces))
    rest = torch.from_numpy(skel.rest_positions)
    r_w, t_w = fk_torch(rest, torch.from_numpy(validate_pose(theta, skel.n_joints)))
    pts = capsule_sample_points(rest, samples_per_bone)
    bone = torch.arange(skel.n_joints - 1).repeat_interleave(samples_per_bone) + 1
    return float(collision_energy_torch(v, n, r_w, t_w, pts, bone, radius))


# --- joint regressor ------------------------------------------------------


@dataclass(frozen=True)
class JointRegressor:
    """Affine map beta -> 3K joint positions; bias is the mean-shape joints."""

    matrix: np.ndarray  # (3K, |beta|)
    bias: np.ndarray  # (3K,)

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bias", b)
        if m.ndim != 2 or b.ndim != 1 or m.shape[0] != b.shape[0] or m.shape[0] % 3:
            raise SkeletonError(f"inconsistent regressor shapes {m.shape}, {b.shape}")

    @property
    def n_joints(self) -> int:
        return self.bias.shape[0] // 3

    @property
    def n_shape(self) -> int:
        return self.matrix.shape[1]


def regress_joints(reg: JointRegressor, beta: np.ndarray) -> np.ndarray:
    b = np.asarray(beta, dtype=np.float64)
    if b.shape != (reg.n_shape,):
        raise SkeletonError(f"beta must be ({reg.n_shape},), got {b.shape}")
    return (reg.bias + reg.matrix @ b).reshape(reg.n_joints, 3)


def fit_joint_regressor(
    pairs: list[tuple[np.ndarray, np.ndarray]], *, ridge: float = 1e-6
) -> tuple[JointRegressor, float]:
    """Least-squares fit of the affine map; returns (regressor, residual RMS in mm).

    Ridge regularization (on the linear part only) kicks in automatically when
    the system is underdetermined.
    """
    if not pairs:
        raise SkeletonError("need at least one (beta, joints) pair")
    betas = np.stack([np.asarray(b, dtype=np.float64) for b, _ in pairs])
    joints = np.stack([np.asarray(j, dtype=np.float64).reshape(-1) for _, j in pairs])
    n, p = betas.shape
    design = np.concatenate([betas, np.ones((n, 1))], axis=1)
    if n >= p + 1:
        coef, *_ = np.linalg.lstsq(design, joints, rcond=None)
    else:
        gram = design.T @ design + ridge * np.diag([1.0] * p + [0.0])
        coef = np.linalg.solve(gram, design.T @ joints)
    matrix = coef[:p].T
    bias = coef[p]
    reg = JointRegressor(matrix=matrix, bias=bias)
    pred = design @ coef
    residual = float(np.sqrt(np.mean((pred - joints) ** 2))) if n else 0.0
    return reg, residual


# --- vertebra template alignment -----------------------------------------


@dataclass(frozen=True)
class LandmarkPair:
    label: str
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(3))

    @property
    def midpoint(self) -> np.ndarray:
        return (self.a + self.b) / 2.0

    @property
    def direction(self) -> np.ndarray:
        return self.b - self.a


@dataclass(frozen=True)
class VertebraTransform:
    """x -> scale * rotation @ (x - template_mid) + scan_mid."""

    scale: float
    rotation: np.ndarray
    template_mid: np.ndarray
    scan_mid: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p - self.template_mid) @ self.rotation.T + self.scan_mid


def _minimal_rotation(d_from: np.ndarray, d_to: np.ndarray) -> np.ndarray:
    u = d_from / np.linalg.norm(d_from)
    v = d_to / np.linalg.norm(d_to)
    axis = np.cross(u, v)
    s = np.linalg.norm(axis)
    c = float(np.dot(u, v))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate pi about any axis orthogonal to u
        helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(u, helper)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    axis = axis / s
    angle = np.arctan2(s, c)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def align_vertebra_template(
    landmarks_template: dict[str, list[LandmarkPair]],
    landmarks_scan: dict[str, list[LandmarkPair]],
) -> dict[str, VertebraTransform]:
    """Per-vertebra similarity transform from matched landmark pairs.

    Scale matches pair length, translation matches midpoints, rotation is the
    minimal rotation taking the template pair direction to the scan's.
    """
    out: dict[str, VertebraTransform] = {}
    for vert, tpl_pairs in landmarks_template.items():
        if vert not in landmarks_scan:
            raise SkeletonError(f"scan landmarks missing vertebra {vert!r}")
        scan_by_label = {p.label: p for p in landmarks_scan[vert]}
        if not tpl_pairs:
            raise SkeletonError(f"vertebra {vert!r} has no landmark pairs")
        tpl = tpl_pairs[0]
        if tpl.label not in scan_by_label:
            raise SkeletonError(f"vertebra {vert!r}: scan lacks pair labeled {tpl.label!r}")
        scan = scan_by_label[tpl.label]
        len_t = np.linalg.norm(tpl.direction)
        len_s = np.linalg.norm(scan.direction)
        if len_t < 1e-12 or len_s < 1e-12:
            raise SkeletonError(f"vertebra {vert!r}: zero-length landmark pair")
        out[vert] = VertebraTransform(
            scale=float(len_s / len_t),
            rotation=_minimal_rotation(tpl.direction, scan.direction),
            template_mid=tpl.midpoint,
            scan_mid=scan.midpoint,
        )
    return out
