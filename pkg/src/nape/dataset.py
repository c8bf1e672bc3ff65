"""Synthetic ground truth standing in for the capture dataset.

Everything derives deterministically from (config, seed): a capped-cylinder
head-and-neck surface with a grid UV atlas, a planted model (shape basis,
skeleton, limits, larynx maps, personalized expression/pose blendshapes via
exactly-linear mapping networks), per-identity neutral meshes and expression
scans, dynamic clips with swallow pulses, joint annotations for a subset,
larynx-tracking normal maps, and recurrence clips for the sequence predictor.

Planted model tensors are quantized to f32-representable values so archive
round trips are bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import torch

from .blendshapes import BlendshapeSet, MappingNetwork
from .larynx import LarynxBasis
from .learning import SequenceClip
from .mesh import Mesh, load_obj, save_obj
from .model import AppearanceSpace, FullParams, HeadNeckModel, forward, load_model, save_model
from .paramio import read_params_csv, read_sequence_csv, write_params_csv, write_sequence_csv
from .pca import PcaSpace
from .rotations import euler_to_axis_angle, matrix_to_euler_xyz, axis_angle_to_matrix
from .skeleton import JointRegressor, Skeleton, default_limits
from .tensorio import quantize_f32, read_tensor, write_tensor
from .uvmap import texel_indices

KERNEL_SIZE = 70  # larynx tracking kernel is 70 x 70 x 3


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    n_vertices: int = 2000
    n_shape: int = 10
    n_expressions: int = 8
    n_identities: int = 40
    clip_frames: int = 120
    fps: float = 30.0
    noise_mm: float = 0.0
    seed: int = 0
    n_subjects: int = 4
    expression_fraction: float = 0.75  # identities with expression scans
    joint_fraction: float = 0.75  # identities with joint annotations
    uv_resolution: tuple[int, int] = (256, 256)
    exp_pcs: int = 6  # planted expression-space rank
    pose_pcs: int = 3  # planted pose-space rank
    shape_sigma: float = 50.0  # leading shape-coefficient scale
    exp_weight_sigma: float = 60.0
    pose_amplitude_mm: float = 0.5
    tau_max: float = 0.1
    track_frames: int = 40
    track_resolution: tuple[int, int] = (128, 128)
    recurrence_clips: int = 24
    recurrence_frames: int = 60
    recurrence_a: float = 0.015
    recurrence_b: float = 0.85
    appearance_count: int = 12
    appearance_resolution: tuple[int, int] = (16, 16)

    def __post_init__(self):
        if self.n_shape > self.n_identities - 1:
            raise DatasetError(
                f"|beta|={self.n_shape} needs at least {self.n_shape + 1} identities for full rank"
            )
        if self.n_subjects > self.n_identities:
            raise DatasetError("more clip subjects than identities")
        if self.clip_frames < 8:
            raise DatasetError("clips need at least 8 frames")


@dataclass
class TrackingData:
    frames: np.ndarray  # (F, H, W, 3) unit normals
    kernel: np.ndarray  # (70, 70, 3)
    tau0: int  # rest row of the planted template (first frame)
    rows: np.ndarray  # (F,) planted top-row per frame


@dataclass
class SyntheticTruth:
    config: SyntheticConfig
    model: HeadNeckModel
    betas: np.ndarray  # (n_identities, n_shape)
    neutral_meshes: list[Mesh]
    larynx_displacements: np.ndarray  # (n_identities, N, 3)
    joint_annotations: dict[int, np.ndarray]
    expression_scans: dict[int, list[Mesh]]
    expression_sets: dict[int, BlendshapeSet]
    clips: list[SequenceClip]  # true params + targets
    tracking: TrackingData
    recurrence: list[dict[str, np.ndarray]]  # {"psi": (T, P), "tau": (T,)}
    textures: np.ndarray  # (n, channels, H, W, 3)
    prior_weights: np.ndarray  # artist-prior skinning weights (== planted)
    retarget_rig: "object" = None  # RigTarget: long-necked same-topology rig


# --- surface and smooth fields ----------------------------------------------


def _grid_shape(n_vertices: int) -> tuple[int, int]:
    cols = max(8, int(round(np.sqrt(n_vertices / 1.25))))
    rows = max(8, n_vertices // cols)
    return rows, cols


def _build_surface(n_vertices: int) -> tuple[Mesh, np.ndarray, np.ndarray]:
    """Capped-cylinder head/neck tube; returns (mesh, t_param, phi)."""
    rows, cols = _grid_shape(n_vertices)
    r_idx, c_idx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    t = (r_idx / (rows - 1)).reshape(-1)
    phi = (2.0 * np.pi * c_idx / cols).reshape(-1)
    radius = (
        60.0
        + 30.0 * np.exp(-(((t - 0.78) / 0.13) ** 2))
        + 15.0 * np.exp(-(((t - 0.02) / 0.10) ** 2))
    )
    verts = np.stack(
        [
            radius * np.cos(phi) + 6.0 * np.sin(np.pi * t),
            radius * np.sin(phi),
            300.0 * t - 80.0,
        ],
        axis=1,
    )
    uv = np.stack([(c_idx.reshape(-1) + 0.5) / cols, (r_idx.reshape(-1) + 0.5) / rows], axis=1)
    faces = []
    for r in range(rows - 1):
        for c in range(cols):
            c2 = (c + 1) % cols
            v00 = r * cols + c
            v01 = r * cols + c2
            v10 = (r + 1) * cols + c
            v11 = (r + 1) * cols + c2
            faces.append((v00, v01, v11))
            faces.append((v00, v11, v10))
    mesh = Mesh(vertices=verts, faces=np.asarray(faces, dtype=np.int64), uv=uv)
    return mesh, t, phi


def _feature_bank(t: np.ndarray, phi: np.ndarray) -> np.ndarray:
    feats = [np.ones_like(t), t, t * t]
    for k in (1, 2, 3):
        feats += [np.sin(k * phi), np.cos(k * phi), t * np.sin(k * phi), t * np.cos(k * phi)]
    for mu in (0.1, 0.3, 0.5, 0.7, 0.9):
        feats.append(np.exp(-(((t - mu) / 0.18) ** 2)))
    return np.stack(feats, axis=1)  # (N, F)


def _smooth_fields(rng: np.random.Generator, count: int, bank: np.ndarray) -> np.ndarray:
    """(count, N, 3) smooth low-order displacement fields, unit RMS."""
    coeff = rng.normal(size=(count, 3, bank.shape[1]))
    fields = np.einsum("nf,cdf->cnd", bank, coeff)
    rms = np.sqrt(np.mean(fields**2, axis=(1, 2), keepdims=True))
    return fields / np.maximum(rms, 1e-12)


def _orthonormal_rows(rows_mat: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(rows_mat.T)
    q = q[:, : rows_mat.shape[0]]
    idx = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[idx, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return (q * signs).T


def _linear_mlp(matrix: np.ndarray, hidden: int = 64) -> MappingNetwork:
    """Embed x -> A x exactly in a 3-layer ReLU MLP (relu(x) - relu(-x) = x)."""
    out_dim, in_dim = matrix.shape
    if hidden < 2 * in_dim:
        raise DatasetError(f"hidden={hidden} too small to embed a {in_dim}-input linear map")
    w1 = np.zeros((hidden, in_dim))
    w1[:in_dim] = np.eye(in_dim)
    w1[in_dim : 2 * in_dim] = -np.eye(in_dim)
    w2 = np.eye(hidden)
    w3 = np.zeros((out_dim, hidden))
    w3[:, :in_dim] = matrix
    w3[:, in_dim : 2 * in_dim] = -matrix
    return MappingNetwork(
        weights=[quantize_f32(w1), quantize_f32(w2), quantize_f32(w3)],
        biases=[np.zeros(hidden), np.zeros(hidden), np.zeros(out_dim)],
        trained=True,
    )


def _centered_descending_coeffs(rng: np.random.Generator, n: int, c: int, sigma: float) -> np.ndarray:
    """(n, c) coefficient matrix with exactly diagonal, descending covariance."""
    g = rng.normal(size=(n, c))
    g -= g.mean(axis=0, keepdims=True)
    u, _, _ = np.linalg.svd(g, full_matrices=False)
    scales = sigma * (0.85 ** np.arange(c)) * np.sqrt(n)
    return u[:, :c] * scales


# --- generator ---------------------------------------------------------------


def generate_dataset(cfg: SyntheticConfig) -> SyntheticTruth:
    rng = np.random.default_rng(cfg.seed)
    mesh, t, phi = _build_surface(cfg.n_vertices)
    n = mesh.n_vertices
    bank = _feature_bank(t, phi)

    # shape space: orthonormal smooth rows, coefficients with diagonal
    # descending covariance so a PCA refit reproduces basis and coefficients
    shape_rows = _orthonormal_rows(_smooth_fields(rng, cfg.n_shape, bank).reshape(cfg.n_shape, -1))
    shape_basis = quantize_f32(shape_rows.T)  # (3N, C)
    betas = _centered_descending_coeffs(rng, cfg.n_identities, cfg.n_shape, cfg.shape_sigma)
    svals = np.linalg.norm(betas, axis=0) ** 2
    shape_space = PcaSpace(
        mean=np.zeros(3 * n),
        basis=shape_basis,
        variance_ratio=quantize_f32(svals / svals.sum()),
    )

    # skeleton along the neck axis with mild anterior lordosis
    k = 8
    zs = 25.0 + 20.0 * np.arange(k)
    rest_joints = np.stack([4.0 + 3.0 * np.sin(np.pi * zs / 180.0), np.zeros(k), zs], axis=1)
    joint_matrix = quantize_f32(0.02 * rng.normal(size=(3 * k, cfg.n_shape)))
    joint_bias = quantize_f32(rest_joints.reshape(-1))
    regressor = JointRegressor(matrix=joint_matrix, bias=joint_bias)
    skeleton = Skeleton(rest_positions=regressor.bias.reshape(k, 3))
    limits = default_limits()

    # skinning prior: linear blend between the two bracketing joints by height
    z = mesh.vertices[:, 2]
    weights = np.zeros((n, k))
    below = z <= zs[0]
    above = z >= zs[-1]
    weights[below, 0] = 1.0
    weights[above, k - 1] = 1.0
    mid = ~(below | above)
    seg = np.clip(np.searchsorted(zs, z[mid]) - 1, 0, k - 2)
    frac = (z[mid] - zs[seg]) / (zs[seg + 1] - zs[seg])
    weights[mid, seg] = 1.0 - frac
    weights[mid, seg + 1] = frac
    weights = quantize_f32(weights)

    # larynx: smooth bump maps over a front-of-neck UV window
    h, w = cfg.uv_resolution
    rows_g, cols_g = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    v_center = 0.42  # neck height in v
    u_center = 0.0  # front seam; wrap-aware column distance
    du = np.minimum(np.abs(cols_g / w - u_center), 1.0 - np.abs(cols_g / w - u_center))
    dv = rows_g / h - v_center
    bump = np.exp(-((dv / 0.055) ** 2) - ((du / 0.07) ** 2))
    window = bump > 1e-3
    lar_fields = []
    for i in range(cfg.n_shape + 1):
        mod = (
            1.0
            + 0.35 * np.sin((2 + i) * np.pi * dv / 0.12)
            + 0.25 * np.cos((1 + i) * 2 * np.pi * du / 0.14)
        )
        direction = np.array([1.0, 0.25 * np.sin(i * 1.3), 0.35 * np.cos(i * 0.7)])
        direction /= np.linalg.norm(direction)
        fielded = (bump * mod)[..., None] * direction[None, None, :]
        fielded[~window] = 0.0
        lar_fields.append(fielded)
    lar_flat = np.stack([f.reshape(-1) for f in lar_fields[1:]])
    lar_components = _orthonormal_rows(lar_flat).reshape(cfg.n_shape, h, w, 3)
    lar_components[:, ~window] = 0.0  # orthonormalization preserves the support
    lar_mean = 3.5 * lar_fields[0]
    lar_scale = 28.0  # beta O(50) times unit maps gives a few-mm larynx
    mask = ndi.binary_dilation(window, iterations=2)
    uv_rows, uv_cols = texel_indices(mesh.uv, (h, w))
    region = np.nonzero(mask[uv_rows, uv_cols])[0]
    larynx = LarynxBasis(
        mean_map=quantize_f32(lar_mean),
        maps=quantize_f32(lar_scale * lar_components / cfg.shape_sigma),
        mask=mask,
        region_vertices=region,
        variance_ratio=quantize_f32(svals / svals.sum()),
    )

    # personalized expression blendshapes through an exactly-linear network;
    # larynx-region vertices stay untouched (the larynx is its own mechanism)
    exp_mean_fields = _smooth_fields(rng, cfg.n_expressions, bank) * 2.0
    exp_mean_fields[:, region] = 0.0
    exp_mean = quantize_f32(exp_mean_fields.reshape(-1))
    exp_raw = np.stack(
        [_smooth_fields(rng, cfg.n_expressions, bank) for _ in range(cfg.exp_pcs)]
    )
    exp_raw[:, :, region] = 0.0
    exp_basis_rows = _orthonormal_rows(exp_raw.reshape(cfg.exp_pcs, -1))
    exp_basis_rows = exp_basis_rows.reshape(cfg.exp_pcs, cfg.n_expressions, n, 3)
    exp_basis_rows[:, :, region] = 0.0  # scrub QR float dust off the masked coords
    exp_basis = quantize_f32(exp_basis_rows.reshape(cfg.exp_pcs, -1).T)
    a_exp = rng.normal(size=(cfg.exp_pcs, cfg.n_shape))
    probe = betas @ a_exp.T
    a_exp *= cfg.exp_weight_sigma / max(probe.std(), 1e-12)
    exp_net = _linear_mlp(quantize_f32(a_exp))
    exp_ratio = np.sort(rng.uniform(0.05, 1.0, cfg.exp_pcs))[::-1]
    exp_space = PcaSpace(
        mean=exp_mean, basis=exp_basis, variance_ratio=quantize_f32(exp_ratio / exp_ratio.sum())
    )

    # personalized pose correctives, calibrated to stay sub-millimeter and
    # likewise zero over the larynx region
    n_corr = 9 * (k - 1)
    pose_mean_fields = _smooth_fields(rng, n_corr, bank)
    pose_mean_fields[:, region] = 0.0
    pose_raw = np.stack([_smooth_fields(rng, n_corr, bank) for _ in range(cfg.pose_pcs)])
    pose_raw[:, :, region] = 0.0
    pose_basis_rows = _orthonormal_rows(pose_raw.reshape(cfg.pose_pcs, -1))
    pose_basis_rows = pose_basis_rows.reshape(cfg.pose_pcs, n_corr, n, 3)
    pose_basis_rows[:, :, region] = 0.0
    pose_basis_rows = pose_basis_rows.reshape(cfg.pose_pcs, -1)
    a_pose_raw = rng.normal(size=(cfg.pose_pcs, cfg.n_shape))
    probe_theta = np.full((k, 3), 0.1)
    probe_theta[0] = 0.0
    from .blendshapes import pose_feature

    feat_probe = pose_feature(probe_theta)
    probe_set = (
        pose_mean_fields.reshape(n_corr, -1)
        + (pose_basis_rows.T @ (a_pose_raw @ betas[0])).reshape(n_corr, -1)
    )
    probe_mag = np.abs(feat_probe @ probe_set).max()
    pose_scale = cfg.pose_amplitude_mm / max(probe_mag, 1e-12)
    pose_mean = quantize_f32(pose_mean_fields.reshape(-1) * pose_scale)
    pose_basis = quantize_f32(pose_basis_rows.T)
    pose_net = _linear_mlp(quantize_f32(a_pose_raw * pose_scale))
    pose_ratio = np.sort(rng.uniform(0.1, 1.0, cfg.pose_pcs))[::-1]
    pose_space = PcaSpace(
        mean=pose_mean, basis=pose_basis, variance_ratio=quantize_f32(pose_ratio / pose_ratio.sum())
    )

    # appearance: smooth per-channel texture stacks
    ah, aw = cfg.appearance_resolution
    tex_bank = _feature_bank(
        np.repeat(np.linspace(0, 1, ah), aw), np.tile(np.linspace(0, 2 * np.pi, aw), ah)
    )
    tex_fields = _smooth_fields(rng, cfg.appearance_count * 3, tex_bank)
    textures = 0.5 + 0.15 * tex_fields.reshape(cfg.appearance_count, 3, ah, aw, 3)
    app_flat = textures.reshape(cfg.appearance_count, -1)
    app_mean = app_flat.mean(axis=0)
    centered = app_flat - app_mean
    _, s_app, vt_app = np.linalg.svd(centered, full_matrices=False)
    keep_app = min(4, cfg.appearance_count - 1)
    appearance = AppearanceSpace(
        space=PcaSpace(
            mean=quantize_f32(app_mean),
            basis=quantize_f32(vt_app[:keep_app].T),
            variance_ratio=quantize_f32(s_app[:keep_app] ** 2 / max((s_app**2).sum(), 1e-30)),
        ),
        resolution=(ah, aw),
    )

    model = HeadNeckModel(
        template=mesh,
        shape_space=shape_space,
        joint_regressor=regressor,
        skeleton=skeleton,
        skin_weights=weights,
        exp_space=exp_space,
        exp_net=exp_net,
        n_expressions=cfg.n_expressions,
        larynx=larynx,
        limits=limits,
        pose_space=pose_space,
        pose_net=pose_net,
        appearance=appearance,
        tau_max=cfg.tau_max,
    )

    # per-identity data
    disp = betas @ shape_basis.T  # (n_id, 3N)
    neutral_meshes = []
    for i in range(cfg.n_identities):
        v = mesh.vertices + disp[i].reshape(n, 3)
        if cfg.noise_mm > 0:
            v = v + rng.normal(scale=cfg.noise_mm, size=v.shape)
        neutral_meshes.append(mesh.with_vertices(v))

    from .larynx import LarynxParams, larynx_displacement

    larynx_disp = np.stack(
        [
            larynx_displacement(larynx, mesh, LarynxParams(eta=1.0, tau=0.0, tau_max=cfg.tau_max), betas[i])
            for i in range(cfg.n_identities)
        ]
    )

    n_joint_ids = max(cfg.n_shape + 1, int(round(cfg.joint_fraction * cfg.n_identities)))
    joint_ids = sorted(rng.choice(cfg.n_identities, size=min(n_joint_ids, cfg.n_identities), replace=False).tolist())
    joint_annotations = {}
    for i in joint_ids:
        ann = (regressor.bias + regressor.matrix @ betas[i]).reshape(k, 3)
        if cfg.noise_mm > 0:
            ann = ann + rng.normal(scale=cfg.noise_mm, size=ann.shape)
        joint_annotations[i] = ann

    n_exp_ids = max(2, int(round(cfg.expression_fraction * cfg.n_identities)))
    exp_ids = sorted(rng.choice(cfg.n_identities, size=min(n_exp_ids, cfg.n_identities), replace=False).tolist())
    expression_scans: dict[int, list[Mesh]] = {}
    expression_sets: dict[int, BlendshapeSet] = {}
    for i in exp_ids:
        sets = model.expression_set(betas[i])
        expression_sets[i] = sets
        scans = []
        for j in range(cfg.n_expressions):
            sv = neutral_meshes[i].vertices + sets.deltas[j].reshape(n, 3)
            scans.append(mesh.with_vertices(sv))
        expression_scans[i] = scans

    clips = [
        _make_clip(model, cfg, rng, subject=f"s{i:02d}", beta=betas[i])
        for i in range(cfg.n_subjects)
    ]

    tracking = _make_tracking(cfg, rng)
    recurrence = _make_recurrence(cfg, rng)
    rig = _make_retarget_rig(model)

    return SyntheticTruth(
        config=cfg,
        model=model,
        betas=betas,
        neutral_meshes=neutral_meshes,
        larynx_displacements=larynx_disp,
        joint_annotations=joint_annotations,
        expression_scans=expression_scans,
        expression_sets=expression_sets,
        clips=clips,
        tracking=tracking,
        recurrence=recurrence,
        textures=textures,
        prior_weights=weights.copy(),
        retarget_rig=rig,
    )


def _make_retarget_rig(model: HeadNeckModel):
    """Long-necked same-topology rig: the template stretched along the spine."""
    from .blendshapes import BlendshapeSet as BSet
    from .synthesis import RigTarget

    stretch = np.diag([0.85, 0.85, 1.8])
    mesh = model.template.with_vertices(model.template.vertices @ stretch.T)
    skeleton = Skeleton(
        rest_positions=model.skeleton.rest_positions @ stretch.T,
        joint_names=model.skeleton.joint_names,
        parents=model.skeleton.parents,
    )
    exp = model.expression_set(np.zeros(model.n_shape))
    exp_deltas = (exp.deltas.reshape(exp.count, -1, 3) @ stretch.T).reshape(exp.count, -1)
    pose = model.pose_set(np.zeros(model.n_shape))
    pose_deltas = None
    if pose is not None:
        pose_deltas = (pose.deltas.reshape(pose.count, -1, 3) @ stretch.T).reshape(pose.count, -1)
    return RigTarget(
        mesh=mesh,
        skeleton=skeleton,
        skin_weights=model.skin_weights,
        expression_set=BSet(deltas=exp_deltas, kind="expression"),
        pose_set=BSet(deltas=pose_deltas, kind="pose") if pose_deltas is not None else None,
    )


def _make_clip(
    model: HeadNeckModel, cfg: SyntheticConfig, rng: np.random.Generator, subject: str, beta: np.ndarray
) -> SequenceClip:
    t_frames = cfg.clip_frames
    k = model.n_joints
    time = np.arange(t_frames) / cfg.fps
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.minimum(np.arange(t_frames) / 15.0, 1.0))

    bounds = model.limits.bounds
    euler = np.zeros((t_frames, k, 3))
    base_freq = rng.uniform(0.25, 0.45, size=3)
    for a in range(3):
        joint_gain = rng.uniform(0.35, 0.65, size=k)
        detune = 1.0 + 0.05 * rng.normal(size=k).cumsum() / max(k, 1)
        for j in range(k):
            amp = joint_gain[j] * min(bounds[j, a, 1], -bounds[j, a, 0])
            euler[:, j, a] = amp * np.sin(2 * np.pi * base_freq[a] * detune[j] * time) * ramp
    theta = euler_to_axis_angle(euler)

    psi = np.zeros((t_frames, cfg.n_expressions))
    for j in range(cfg.n_expressions):
        c = rng.uniform(0.35, 0.6)
        a_j = rng.uniform(0.05, c - 0.05)
        f_j = rng.uniform(0.2, 0.5)
        ph = rng.uniform(0, 2 * np.pi)
        psi[:, j] = c + a_j * np.sin(2 * np.pi * f_j * time + ph) * ramp

    eta = np.full(t_frames, rng.uniform(0.75, 1.25))
    pulse_amp = rng.uniform(0.025, 0.045)
    center = rng.uniform(0.35, 0.65) * t_frames
    width = rng.uniform(6.0, 10.0)
    tau = pulse_amp * np.exp(-0.5 * ((np.arange(t_frames) - center) / width) ** 2)

    targets = np.empty((t_frames, model.n_vertices, 3))
    for f in range(t_frames):
        params = FullParams(beta=beta, psi=psi[f], theta=theta[f], eta=eta[f], tau=tau[f])
        targets[f] = forward(model, params).vertices
    if cfg.noise_mm > 0:
        targets = targets + rng.normal(scale=cfg.noise_mm, size=targets.shape)
    return SequenceClip(
        subject=subject, beta=beta, theta=theta, psi=psi, eta=eta, tau=tau,
        fps=cfg.fps, targets=targets,
    )


def _make_tracking(cfg: SyntheticConfig, rng: np.random.Generator) -> TrackingData:
    h, w = cfg.track_resolution
    if h < KERNEL_SIZE or w < KERNEL_SIZE:
        raise DatasetError("tracking frames must be at least kernel-sized")
    ky, kx = np.meshgrid(np.linspace(-1, 1, KERNEL_SIZE), np.linspace(-1, 1, KERNEL_SIZE), indexing="ij")
    bump = np.exp(-2.5 * (kx**2 + ky**2))
    ripple = 0.4 * np.sin(6.0 * np.pi * ky) * bump
    gx = -4.0 * kx * bump + 0.5 * np.sin(4 * np.pi * kx)
    gy = -4.0 * ky * bump + ripple * 3.0
    kernel = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    kernel /= np.linalg.norm(kernel, axis=-1, keepdims=True)

    max_row = h - KERNEL_SIZE
    tau0 = int(round(0.5 * max_row))
    f_idx = np.arange(cfg.track_frames)
    drift = 0.35 * max_row * np.sin(2 * np.pi * f_idx / max(cfg.track_frames, 2)) * np.minimum(f_idx / 5.0, 1.0)
    rows = np.clip(np.round(tau0 + drift).astype(np.int64), 0, max_row)
    rows[0] = tau0

    frames = np.empty((cfg.track_frames, h, w, 3))
    col0 = (w - KERNEL_SIZE) // 2
    for f in range(cfg.track_frames):
        base = rng.normal(size=(h // 8 + 2, w // 8 + 2, 2))
        up_y = np.linspace(0, base.shape[0] - 1.001, h)
        up_x = np.linspace(0, base.shape[1] - 1.001, w)
        iy, ix = np.floor(up_y).astype(int), np.floor(up_x).astype(int)
        fy, fx = up_y - iy, up_x - ix
        smooth = (
            base[iy][:, ix] * ((1 - fy)[:, None] * (1 - fx)[None, :])[..., None]
            + base[iy + 1][:, ix] * (fy[:, None] * (1 - fx)[None, :])[..., None]
            + base[iy][:, ix + 1] * ((1 - fy)[:, None] * fx[None, :])[..., None]
            + base[iy + 1][:, ix + 1] * (fy[:, None] * fx[None, :])[..., None]
        )
        frame = np.concatenate([0.35 * smooth, np.ones((h, w, 1))], axis=-1)
        frame /= np.linalg.norm(frame, axis=-1, keepdims=True)
        r = rows[f]
        frame[r : r + KERNEL_SIZE, col0 : col0 + KERNEL_SIZE] = kernel
        frames[f] = frame
    return TrackingData(frames=frames, kernel=kernel, tau0=tau0, rows=rows)


def _make_recurrence(cfg: SyntheticConfig, rng: np.random.Generator) -> list[dict[str, np.ndarray]]:
    clips = []
    for _ in range(cfg.recurrence_clips):
        t_frames = cfg.recurrence_frames
        time = np.arange(t_frames)
        psi = np.zeros((t_frames, cfg.n_expressions))
        for j in range(cfg.n_expressions):
            c = rng.uniform(0.25, 0.55)
            a_j = rng.uniform(0.1, 0.3)
            f_j = rng.uniform(0.02, 0.08)
            ph = rng.uniform(0, 2 * np.pi)
            psi[:, j] = c + a_j * np.sin(2 * np.pi * f_j * time + ph)
        tau = np.zeros(t_frames)
        tau[0] = cfg.recurrence_a * psi[0, 0] / (1.0 - cfg.recurrence_b)
        for f in range(1, t_frames):
            tau[f] = cfg.recurrence_a * psi[f, 0] + cfg.recurrence_b * tau[f - 1]
        clips.append({"psi": psi, "tau": tau})
    return clips


# --- perturbation for recovery experiments -----------------------------------


@dataclass(frozen=True)
class PerturbSpec:
    theta_sigma: float = 0.05  # radians, per axis-angle component
    psi_sigma: float = 0.02
    eta_rel_sigma: float = 0.05
    tau_sigma: float = 0.005
    seed: int = 1


def perturb(truth: SyntheticTruth, spec: PerturbSpec | None = None) -> list[SequenceClip]:
    """Initial guesses: truth parameters plus seeded noise; theta noise is
    resampled per joint until the pose stays inside the limits table."""
    spec = spec or PerturbSpec()
    rng = np.random.default_rng(spec.seed)
    bounds = truth.model.limits.bounds
    out = []
    for clip in truth.clips:
        theta = clip.theta.copy()
        if spec.theta_sigma > 0:
            pending = np.ones(theta.shape[:2], dtype=bool)
            for _ in range(200):
                if not pending.any():
                    break
                cand = clip.theta + rng.normal(scale=spec.theta_sigma, size=theta.shape)
                e = matrix_to_euler_xyz(axis_angle_to_matrix(torch.from_numpy(cand))).numpy()
                ok = np.all((e >= bounds[None, :, :, 0]) & (e <= bounds[None, :, :, 1]), axis=2)
                accept = pending & ok
                theta[accept] = cand[accept]
                pending &= ~ok
        psi = np.clip(clip.psi + rng.normal(scale=spec.psi_sigma, size=clip.psi.shape), 0.0, 1.5)
        eta = clip.eta * (1.0 + rng.normal(scale=spec.eta_rel_sigma, size=clip.eta.shape))
        tau = np.clip(
            clip.tau + rng.normal(scale=spec.tau_sigma, size=clip.tau.shape),
            -truth.model.tau_max,
            truth.model.tau_max,
        )
        out.append(replace(clip, theta=theta, psi=psi, eta=np.clip(eta, 0.0, 2.0), tau=tau))
    return out


# --- archive I/O --------------------------------------------------------------


def write_dataset(truth: SyntheticTruth, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(truth.model, out / "model")
    (out / "neutrals").mkdir(exist_ok=True)
    for i, m in enumerate(truth.neutral_meshes):
        save_obj(m, out / "neutrals" / f"id_{i:03d}.obj")
    write_tensor(out / "larynx_displacements.hck", truth.larynx_displacements)
    write_tensor(out / "prior_weights.hck", truth.prior_weights)

    lines = ["identity joint x y z"]
    for i, ann in sorted(truth.joint_annotations.items()):
        for j, name in enumerate(truth.model.skeleton.joint_names):
            x, y, z = (repr(float(v)) for v in ann[j])
            lines.append(f"{i} {name} {x} {y} {z}")
    (out / "joint_annotations.txt").write_text("\n".join(lines) + "\n")

    (out / "expressions").mkdir(exist_ok=True)
    for i, scans in sorted(truth.expression_scans.items()):
        for j, scan in enumerate(scans):
            save_obj(scan, out / "expressions" / f"id_{i:03d}_au{j:02d}.obj")

    (out / "clips").mkdir(exist_ok=True)
    for c in truth.clips:
        cdir = out / "clips" / c.subject
        cdir.mkdir(exist_ok=True)
        write_params_csv(cdir / "params_true.csv", c.beta, c.psi, c.theta, c.eta, c.tau)
        write_tensor(cdir / "targets.hck", c.targets)

    (out / "tracking").mkdir(exist_ok=True)
    write_tensor(out / "tracking" / "frames.hck", truth.tracking.frames)
    write_tensor(out / "tracking" / "kernel.hck", truth.tracking.kernel)
    write_sequence_csv(
        out / "tracking" / "rows.csv",
        {"row": truth.tracking.rows.astype(np.float64)},
    )

    (out / "recurrence").mkdir(exist_ok=True)
    for i, clip in enumerate(truth.recurrence):
        write_sequence_csv(out / "recurrence" / f"clip_{i:03d}.csv", {"psi": clip["psi"], "tau": clip["tau"]})

    write_tensor(out / "textures.hck", truth.textures)
    if truth.retarget_rig is not None:
        from .synthesis import save_rig

        save_rig(truth.retarget_rig, out / "rig")

    manifest = {
        "format": "nape-dataset",
        "version": 1,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(truth.config).items()},
        "identities": len(truth.neutral_meshes),
        "subjects": [c.subject for c in truth.clips],
        "joint_identities": sorted(truth.joint_annotations),
        "expression_identities": sorted(truth.expression_scans),
        "tracking_tau0": truth.tracking.tau0,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_dataset(src_dir: str | Path) -> SyntheticTruth:
    src = Path(src_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{src}: missing manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "nape-dataset":
        raise DatasetError(f"{src}: not a dataset archive")
    raw_cfg = manifest["config"]
    cfg = SyntheticConfig(
        **{k: (tuple(v) if isinstance(v, list) else v) for k, v in raw_cfg.items()}
    )
    model = load_model(src / "model")
    neutral_meshes = [
        load_obj(src / "neutrals" / f"id_{i:03d}.obj") for i in range(manifest["identities"])
    ]
    larynx_disp = read_tensor(src / "larynx_displacements.hck")
    prior_weights = read_tensor(src / "prior_weights.hck")

    joint_annotations: dict[int, np.ndarray] = {}
    name_to_idx = {name: j for j, name in enumerate(model.skeleton.joint_names)}
    lines = (src / "joint_annotations.txt").read_text().splitlines()[1:]
    for line in lines:
        if not line.strip():
            continue
        ident, joint, x, y, z = line.split()
        i = int(ident)
        joint_annotations.setdefault(i, np.zeros((model.n_joints, 3)))
        joint_annotations[i][name_to_idx[joint]] = (float(x), float(y), float(z))

    expression_scans: dict[int, list[Mesh]] = {}
    expression_sets: dict[int, BlendshapeSet] = {}
    for i in manifest["expression_identities"]:
        scans = [
            load_obj(src / "expressions" / f"id_{i:03d}_au{j:02d}.obj")
            for j in range(cfg.n_expressions)
        ]
        expression_scans[i] = scans
        deltas = np.stack(
            [(s.vertices - neutral_meshes[i].vertices).ravel() for s in scans]
        )
        expression_sets[i] = BlendshapeSet(deltas=deltas, kind="expression")

    disp = np.stack([m.vertices - model.template.vertices for m in neutral_meshes])
    betas = disp.reshape(len(neutral_meshes), -1) @ model.shape_space.basis

    clips = []
    for subject in manifest["subjects"]:
        cdir = src / "clips" / subject
        payload = read_params_csv(cdir / "params_true.csv")
        clips.append(
            SequenceClip(
                subject=subject,
                beta=payload["beta"][0],
                theta=payload["theta"],
                psi=payload["psi"],
                eta=payload["eta"],
                tau=payload["tau"],
                fps=cfg.fps,
                targets=read_tensor(cdir / "targets.hck"),
            )
        )

    rows = read_sequence_csv(src / "tracking" / "rows.csv")["row"].astype(np.int64)
    tracking = TrackingData(
        frames=read_tensor(src / "tracking" / "frames.hck"),
        kernel=read_tensor(src / "tracking" / "kernel.hck"),
        tau0=int(manifest["tracking_tau0"]),
        rows=rows,
    )
    recurrence = []
    for i in range(cfg.recurrence_clips):
        payload = read_sequence_csv(src / "recurrence" / f"clip_{i:03d}.csv")
        recurrence.append({"psi": payload["psi"], "tau": payload["tau"]})

    rig = None
    if (src / "rig" / "rig.json").exists():
        from .synthesis import load_rig

        rig = load_rig(src / "rig")

    return SyntheticTruth(
        config=cfg,
        model=model,
        betas=betas,
        neutral_meshes=neutral_meshes,
        larynx_displacements=larynx_disp,
        joint_annotations=joint_annotations,
        expression_scans=expression_scans,
        expression_sets=expression_sets,
        clips=clips,
        tracking=tracking,
        recurrence=recurrence,
        textures=read_tensor(src / "textures.hck"),
        prior_weights=prior_weights,
        retarget_rig=rig,
    )
