"""Two-stage model learning and parameter fitting.

Static stage: template mean, shape PCA, larynx basis, joint regressor, and the
expression mapping network from rest-pose data. Dynamic stage: joint
gradient-based estimation of per-frame parameters, per-subject pose
correctives and shared skinning weights under the seven-term objective, then
the pose mapping network. Optimization runs on PyTorch Adam, learning rate
0.001 for the dynamic stage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import torch

from .blendshapes import (
    BlendshapeSet,
    MappingNetwork,
    MappingTrainConfig,
    pose_feature_torch,
    train_mapping_network,
)
from .larynx import LarynxBasis, fit_larynx_basis, larynx_offset_torch
from .mesh import Mesh, graph_laplacian, vertex_normals_torch
from .model import FullParams, HeadNeckModel, forward
from .pca import PcaSpace, fit_pca, project
from .skeleton import (
    JointRegressor,
    Skeleton,
    capsule_sample_points,
    collision_energy_torch,
    fit_joint_regressor,
    fk_torch,
    lbs_torch,
    limit_excess_torch,
    adjacent_similarity_torch,
    regress_joints,
)

PAPER_LOSS_WEIGHTS = (1e5, 1e6, 5e3, 5e5, 1e6, 5e-2, 1.0)
LOSS_TERMS = ("rec", "rot", "sim", "col", "tem", "smo", "ski")


class LearningError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Weights on (E_rec, E_rot, E_sim, E_col, E_tem, E_smo, E_ski)."""

    w_rec: float = PAPER_LOSS_WEIGHTS[0]
    w_rot: float = PAPER_LOSS_WEIGHTS[1]
    w_sim: float = PAPER_LOSS_WEIGHTS[2]
    w_col: float = PAPER_LOSS_WEIGHTS[3]
    w_tem: float = PAPER_LOSS_WEIGHTS[4]
    w_smo: float = PAPER_LOSS_WEIGHTS[5]
    w_ski: float = PAPER_LOSS_WEIGHTS[6]

    def __post_init__(self):
        for name in ("w_rec", "w_rot", "w_sim", "w_col", "w_tem", "w_smo", "w_ski"):
            if getattr(self, name) < 0:
                raise LearningError(f"{name} must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.w_rec, self.w_rot, self.w_sim, self.w_col, self.w_tem, self.w_smo, self.w_ski)


@dataclass(frozen=True)
class FamilySmoothness:
    """(lambda_v, lambda_1, lambda_2, epsilon) for one parameter family."""

    lam_v: float = 1.0
    lam_1: float = 1.0
    lam_2: float = 1.0
    eps: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise LearningError("epsilon must be non-negative")


@dataclass(frozen=True)
class TemporalConfig:
    psi: FamilySmoothness = FamilySmoothness(1.0, 1.0, 0.01, 0.1)
    theta: FamilySmoothness = FamilySmoothness(1.0, 1.0, 5000.0, 0.15)
    eta: FamilySmoothness = FamilySmoothness(1.0, 1.0, 10.0, 0.005)
    tau: FamilySmoothness = FamilySmoothness(1.0, 1.0, 1.0, 0.001)

    def for_family(self, name: str) -> FamilySmoothness:
        return getattr(self, name)


@dataclass
class SequenceClip:
    """One dynamic clip: stacked per-frame parameters and optional targets.

    theta (T, K, 3), psi (T, P), eta (T,), tau (T,); targets (T, N, 3) vertex
    arrays on the shared topology.
    """

    subject: str
    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    eta: np.ndarray
    tau: np.ndarray
    fps: float
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.eta = np.asarray(self.eta, dtype=np.float64).ravel()
        self.tau = np.asarray(self.tau, dtype=np.float64).ravel()
        if self.fps <= 0:
            raise LearningError("fps must be positive")
        t = self.theta.shape[0]
        if self.theta.ndim != 3 or self.psi.shape[0] != t or self.eta.shape[0] != t or self.tau.shape[0] != t:
            raise LearningError("clip arrays must share the frame dimension")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape[0] != t:
                raise LearningError("targets must have one mesh per frame")

    @property
    def n_frames(self) -> int:
        return self.theta.shape[0]


# --- loss terms ------------------------------------------------------------


def temporal_energy_torch(seq: torch.Tensor, cfg: FamilySmoothness) -> torch.Tensor:
    """Lipschitz + curvature penalty over the frame dimension (dim 0).

    Derivatives are unit-frame finite differences; the paper's per-family
    constants assume this spacing.
    """
    d1 = seq[1:] - seq[:-1]
    d2 = seq[2:] - 2.0 * seq[1:-1] + seq[:-2]
    lipschitz = torch.clamp(d1.abs() - cfg.eps, min=0.0).pow(2).sum()
    curvature = d2.pow(2).sum()
    return cfg.lam_v * (cfg.lam_1 * lipschitz + cfg.lam_2 * curvature)


def temporal_energy(seq: np.ndarray, cfg: FamilySmoothness, fps: float = 30.0) -> float:
    """Temporal penalty for one scalar series sampled at ``fps``."""
    s = np.asarray(seq, dtype=np.float64)
    if s.shape[0] < 3:
        raise LearningError("temporal energy needs at least 3 frames")
    if fps <= 0:
        raise LearningError("fps must be positive")
    return float(temporal_energy_torch(torch.from_numpy(s), cfg))


def reconstruction_energy(
    model: HeadNeckModel,
    params_per_frame: list[FullParams],
    target_meshes: list[Mesh] | np.ndarray,
) -> float:
    """Sum over frames of summed squared vertex distances, in mm^2."""
    total = 0.0
    for params, target in zip(params_per_frame, target_meshes, strict=True):
        if isinstance(target, Mesh):
            if target.topology_id != model.template.topology_id:
                raise LearningError("target topology does not match the model template")
            tv = target.vertices
        else:
            tv = np.asarray(target, dtype=np.float64)
        out = forward(model, params)
        diff = out.vertices - tv
        total += float(np.sum(diff * diff))
    return total


def skinning_prior_energy(weights: np.ndarray, prior: np.ndarray) -> float:
    d = np.asarray(weights, dtype=np.float64) - np.asarray(prior, dtype=np.float64)
    return float(np.sum(d * d))


def laplacian_torch(lap: sp.spmatrix, dtype: torch.dtype) -> torch.Tensor:
    coo = lap.tocoo()
    idx = torch.from_numpy(np.stack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(coo.data).to(dtype), coo.shape).coalesce()


def smoothness_energy_torch(lap_t: torch.Tensor, fields_flat: torch.Tensor) -> torch.Tensor:
    """||L f||^2 summed over all columns; fields_flat is (N, C)."""
    return torch.sparse.mm(lap_t, fields_flat).pow(2).sum()


# --- static stage ----------------------------------------------------------


@dataclass
class StaticConfig:
    n_shape: int = 50  # principal components kept for the shape space
    n_expression_pcs: int = 50  # output width of the expression mapping network
    uv_resolution: tuple[int, int] = (256, 256)
    mapping: MappingTrainConfig = field(default_factory=MappingTrainConfig)


@dataclass
class StaticResult:
    template: Mesh
    shape_space: PcaSpace
    betas: np.ndarray  # (n_identities, n_shape)
    larynx_basis: LarynxBasis
    joint_regressor: JointRegressor
    joint_residual_mm: float
    exp_space: PcaSpace
    exp_net: MappingNetwork
    expression_sets: dict[int, BlendshapeSet]
    n_expressions: int


def learn_static(
    neutral_meshes: list[Mesh],
    larynx_displacements: list[np.ndarray],
    joint_annotations: dict[int, np.ndarray],
    expression_scans: dict[int, list[Mesh]],
    config: StaticConfig | None = None,
) -> StaticResult:
    """Static geometry stage on rest-pose data.

    neutral_meshes: larynx-removed neutral scans, shared topology.
    larynx_displacements: per-identity (N, 3) original-minus-removed fields.
    joint_annotations: identity index -> (K, 3) annotated joints (subset).
    expression_scans: identity index -> one scan per expression slot (subset).
    """
    cfg = config or StaticConfig()
    if not neutral_meshes:
        raise LearningError("no neutral meshes")
    if len(larynx_displacements) != len(neutral_meshes):
        raise LearningError("need one larynx displacement field per neutral mesh")
    topo = neutral_meshes[0].topology_id
    for i, m in enumerate(neutral_meshes):
        if m.topology_id != topo:
            raise LearningError(f"topology mismatch at neutral mesh {i}")

    stack = np.stack([m.vertices for m in neutral_meshes])
    mean_vertices = stack.mean(axis=0)
    template = neutral_meshes[0].with_vertices(mean_vertices)

    n_id = len(neutral_meshes)
    keep = min(cfg.n_shape, n_id - 1, 3 * template.n_vertices)
    if keep < cfg.n_shape:
        warnings.warn(f"shape components clamped to data rank: {cfg.n_shape} -> {keep}")
    disps = (stack - mean_vertices).reshape(n_id, -1)
    shape_space = fit_pca(disps, keep=keep)
    betas = disps @ shape_space.basis  # == project() per row; mean(disps) is 0

    larynx_basis = fit_larynx_basis(
        [(betas[i], larynx_displacements[i]) for i in range(n_id)],
        template,
        cfg.uv_resolution,
        keep=keep,
    )

    if not joint_annotations:
        raise LearningError("no joint annotations")
    pairs = [(betas[i], joints) for i, joints in sorted(joint_annotations.items())]
    joint_regressor, joint_residual = fit_joint_regressor(pairs)

    if not expression_scans:
        raise LearningError("no expression scans")
    counts = {len(scans) for scans in expression_scans.values()}
    if len(counts) != 1:
        raise LearningError("every scanned identity needs the same expression count")
    n_expressions = counts.pop()
    sets: dict[int, BlendshapeSet] = {}
    for i, scans in sorted(expression_scans.items()):
        deltas = np.stack(
            [(s.vertices - neutral_meshes[i].vertices).ravel() for s in scans]
        )
        sets[i] = BlendshapeSet(deltas=deltas, kind="expression")
    flat_sets = np.stack([sets[i].deltas.ravel() for i in sorted(sets)])
    keep_e = min(cfg.n_expression_pcs, flat_sets.shape[0] - 1, flat_sets.shape[1])
    if keep_e < cfg.n_expression_pcs:
        warnings.warn(f"expression PCs clamped to data rank: {cfg.n_expression_pcs} -> {keep_e}")
    exp_space = fit_pca(flat_sets, keep=keep_e)
    exp_net = train_mapping_network(
        [(betas[i], sets[i]) for i in sorted(sets)], exp_space, cfg.mapping
    )
    return StaticResult(
        template=template,
        shape_space=shape_space,
        betas=betas,
        larynx_basis=larynx_basis,
        joint_regressor=joint_regressor,
        joint_residual_mm=joint_residual,
        exp_space=exp_space,
        exp_net=exp_net,
        expression_sets=sets,
        n_expressions=n_expressions,
    )


def fit_appearance(
    textures: np.ndarray, keep: int, channels: tuple[str, ...] = ("diffuse", "specular", "normal")
):
    """PCA over stacked texture blocks (n, channels, H, W, 3) -> AppearanceSpace."""
    from .model import AppearanceSpace

    tex = np.asarray(textures, dtype=np.float64)
    if tex.ndim != 5 or tex.shape[1] != len(channels) or tex.shape[4] != 3:
        raise LearningError(f"textures must be (n, {len(channels)}, H, W, 3), got {tex.shape}")
    n = tex.shape[0]
    space = fit_pca(tex.reshape(n, -1), keep=min(keep, n - 1))
    return AppearanceSpace(space=space, resolution=(tex.shape[2], tex.shape[3]), channels=channels)


# --- batched differentiable engine -----------------------------------------


class _Engine:
    """Shared torch tensors for batched forward evaluation of one model."""

    def __init__(self, model: HeadNeckModel, dtype: torch.dtype = torch.float64):
        self.model = model
        self.dtype = dtype
        self.template_v = torch.from_numpy(model.template.vertices).to(dtype)
        self.faces = torch.from_numpy(model.template.faces)
        self.shape_basis = torch.from_numpy(model.shape_space.basis).to(dtype)  # (3N, C)
        self.bounds = torch.from_numpy(model.limits.bounds).to(dtype)
        self.joint_matrix = torch.from_numpy(model.joint_regressor.matrix).to(dtype)
        self.joint_bias = torch.from_numpy(model.joint_regressor.bias).to(dtype)
        lar = model.larynx
        from .uvmap import texel_indices

        rows, cols = texel_indices(model.template.uv, lar.resolution)
        self.lar_mean = torch.from_numpy(lar.mean_map).to(dtype)
        self.lar_maps = torch.from_numpy(lar.maps).to(dtype)
        self.lar_rows = torch.from_numpy(rows[lar.region_vertices])
        self.lar_cols = torch.from_numpy(cols[lar.region_vertices])
        self.lar_region = torch.from_numpy(lar.region_vertices)
        self.capsule_bone = torch.arange(model.n_joints - 1).repeat_interleave(4) + 1
        self.exp_mean = torch.from_numpy(model.exp_space.mean).to(dtype)
        self.exp_basis = torch.from_numpy(model.exp_space.basis).to(dtype)
        self.exp_net = [
            (torch.from_numpy(w).to(dtype), torch.from_numpy(b).to(dtype))
            for w, b in zip(model.exp_net.weights, model.exp_net.biases)
        ]
        self.pose_net = None
        if model.pose_net is not None:
            self.pose_mean = torch.from_numpy(model.pose_space.mean).to(dtype)
            self.pose_basis = torch.from_numpy(model.pose_space.basis).to(dtype)
            self.pose_net = [
                (torch.from_numpy(w).to(dtype), torch.from_numpy(b).to(dtype))
                for w, b in zip(model.pose_net.weights, model.pose_net.biases)
            ]

    def base_rest(self, beta: torch.Tensor) -> torch.Tensor:
        """Template plus shape offset, (N, 3)."""
        return self.template_v + (self.shape_basis @ beta).reshape(-1, 3)

    def joints(self, beta: torch.Tensor) -> torch.Tensor:
        return (self.joint_bias + self.joint_matrix @ beta).reshape(-1, 3)

    def exp_deltas(self, beta: torch.Tensor) -> torch.Tensor:
        """Personalized expression blendshapes M_E(beta), (|psi|, 3N)."""
        from .blendshapes import mapping_forward_torch

        weights = [w for w, _ in self.exp_net]
        biases = [b for _, b in self.exp_net]
        flat = self.exp_mean + self.exp_basis @ mapping_forward_torch(weights, biases, beta)
        return flat.reshape(self.model.n_expressions, -1)

    def pose_deltas(self, beta: torch.Tensor) -> torch.Tensor | None:
        if self.pose_net is None:
            return None
        from .blendshapes import mapping_forward_torch

        weights = [w for w, _ in self.pose_net]
        biases = [b for _, b in self.pose_net]
        flat = self.pose_mean + self.pose_basis @ mapping_forward_torch(weights, biases, beta)
        return flat.reshape(self.model.n_pose_correctives, -1)

    def larynx_term(self, beta: torch.Tensor, eta: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        """(B, N, 3) full larynx displacement (mean included)."""
        c = self.lar_maps.shape[0]
        if beta.shape[0] < c:
            beta = torch.cat([beta, torch.zeros(c - beta.shape[0], dtype=self.dtype)])
        return larynx_offset_torch(
            self.lar_mean,
            self.lar_maps,
            self.lar_rows,
            self.lar_cols,
            self.lar_region,
            self.model.n_vertices,
            beta[:c],
            eta,
            tau,
            include_mean=True,
        )

    def frames(
        self,
        base: torch.Tensor,
        joints: torch.Tensor,
        weights: torch.Tensor,
        beta: torch.Tensor,
        psi: torch.Tensor,
        theta: torch.Tensor,
        eta: torch.Tensor,
        tau: torch.Tensor,
        exp_deltas: torch.Tensor | None,
        pose_deltas: torch.Tensor | None,
    ) -> torch.Tensor:
        """Posed vertices (B, N, 3) for stacked frame parameters."""
        n = base.shape[0]
        v = base[None] + self.larynx_term(beta, eta, tau)
        if exp_deltas is not None:
            v = v + (psi @ exp_deltas).reshape(-1, n, 3)
        if pose_deltas is not None:
            v = v + (pose_feature_torch(theta) @ pose_deltas).reshape(-1, n, 3)
        world_r, world_t = fk_torch(joints, theta)
        return lbs_torch(v, weights, world_r, world_t)

    def collision(self, skinned: torch.Tensor, theta: torch.Tensor, joints: torch.Tensor, radius: float) -> torch.Tensor:
        normals = vertex_normals_torch(skinned, self.faces)
        world_r, world_t = fk_torch(joints, theta)
        pts = capsule_sample_points(joints, 4)
        return collision_energy_torch(
            skinned, normals, world_r, world_t, pts, self.capsule_bone, radius
        ).sum()

    def blend_matrices(self, weights: torch.Tensor, theta: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
        """Per-vertex skinning matrices B_tn = I + sum_k w_nk (R_k - I), (B, N, 3, 3).

        Delta-form LBS satisfies skin(v + d) - skin(v) = B d exactly, so rest-space
        offsets map through B.
        """
        world_r, _ = fk_torch(joints, theta)
        eye = torch.eye(3, dtype=weights.dtype)
        return eye + torch.einsum("nk,bkij->bnij", weights, world_r - eye)


# --- dynamic stage ----------------------------------------------------------


@dataclass
class DynamicConfig:
    learning_rate: float = 1e-3  # Adam
    lr_final: float = 1e-5  # cosine decay floor; Adam limit-cycles at ~lr otherwise
    epochs: int = 2000  # desk-scale budget; the full-budget flag lifts it
    full_budget: bool = False
    full_budget_epochs: int = 45000
    patience: int = 300
    # L-BFGS pre-solve of the per-frame parameters (pose sets and weights
    # frozen); adjacent joints are nearly redundant for the skin, and
    # first-order steps crawl along those valleys without it
    warm_start_iters: int = 150
    warm_start_rounds: int = 2  # alternate param solve / closed-form pose-set solve
    final_polish: bool = True  # re-solve per-frame params once the shared tensors settle
    weights: LossWeights = field(default_factory=LossWeights)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    pose_pcs: int = 6
    collision_radius: float = 8.0
    optimize_weights: bool = True
    optimize_pose_sets: bool = True
    fine_tune_expressions: bool = False
    dtype: str = "float32"
    seed: int = 0
    mapping: MappingTrainConfig = field(default_factory=MappingTrainConfig)


@dataclass
class DynamicResult:
    clips: list[SequenceClip]
    pose_sets: dict[str, BlendshapeSet]
    skin_weights: np.ndarray
    pose_space: PcaSpace | None
    pose_net: MappingNetwork | None
    history: list[dict[str, float]]
    log_lines: list[str]

    def loss_curve(self) -> np.ndarray:
        return np.array([h["total"] for h in self.history])


def _clip_temporal(
    cfg: TemporalConfig, psi: torch.Tensor, theta: torch.Tensor, eta: torch.Tensor, tau: torch.Tensor
) -> torch.Tensor:
    e = temporal_energy_torch(psi, cfg.psi)
    e = e + temporal_energy_torch(theta.reshape(theta.shape[0], -1), cfg.theta)
    e = e + temporal_energy_torch(eta, cfg.eta)
    e = e + temporal_energy_torch(tau, cfg.tau)
    return e


def _solve_pose_sets(
    model: HeadNeckModel,
    clip_state: list[dict],
    exp_deltas_t: dict[str, torch.Tensor],
    pose_sets_t: dict[str, torch.Tensor],
    weights_np: np.ndarray,
    ridge: float = 0.03,
) -> None:
    """Minimal-norm least-squares pose correctives given the per-frame params.

    The correctives enter the skinned mesh linearly (skin(v + Fp) = skin(v) +
    B F p in delta form), so per subject the reconstruction-optimal set is a
    truncated-SVD solve. E_smo's pull (w_smo/w_rec ~ 5e-7) is left to the
    joint gradient stage.
    """
    engine = _Engine(model, torch.float64)
    w_t = torch.from_numpy(np.asarray(weights_np, dtype=np.float64))
    by_subject: dict[str, list[dict]] = {}
    for st in clip_state:
        by_subject.setdefault(st["clip"].subject, []).append(st)
    for subject, states in by_subject.items():
        feats, rests = [], []
        for st in states:
            clip: SequenceClip = st["clip"]
            beta = torch.from_numpy(clip.beta)
            base = engine.base_rest(beta)
            joints = engine.joints(beta)
            theta = st["theta"].detach().double()
            skin0 = engine.frames(
                base, joints, w_t, beta, st["psi"].detach().double(), theta,
                st["eta"].detach().double(), st["tau"].detach().double(),
                exp_deltas_t[subject].detach().double(), None,
            )
            residual = torch.from_numpy(clip.targets) - skin0
            blend = engine.blend_matrices(w_t, theta, joints)
            rest_residual = torch.linalg.solve(blend, residual[..., None]).squeeze(-1)
            feats.append(pose_feature_torch(theta))
            rests.append(rest_residual.reshape(theta.shape[0], -1))
        f = torch.cat(feats)  # (T_total, 9(K-1))
        r = torch.cat(rests)  # (T_total, 3N)
        # Tikhonov-filtered solve: clip trajectories excite only part of the
        # 9(K-1)-dim feature space; unexcited directions must shrink to zero
        # instead of amplifying residual into huge correctives
        u, s, vh = torch.linalg.svd(f, full_matrices=False)
        lam = ridge * s[0]
        filt = s / (s * s + lam * lam)
        solution = vh.T @ (filt[:, None] * (u.T @ r))
        region = torch.from_numpy(model.larynx.region_vertices)
        solution = solution.reshape(-1, model.n_vertices, 3)
        solution[:, region] = 0.0  # larynx region belongs to the larynx function
        with torch.no_grad():
            pose_sets_t[subject].copy_(
                solution.reshape(-1, 3 * model.n_vertices).to(pose_sets_t[subject].dtype)
            )


def _solve_larynx_params(
    model: HeadNeckModel,
    clip_state: list[dict],
    exp_deltas_t: dict[str, torch.Tensor],
    pose_sets_t: dict[str, torch.Tensor],
    weights_np: np.ndarray,
    grid_step_texels: float = 0.25,
) -> None:
    """Per-frame global (eta, tau) solve by 1-D vertical search.

    The larynx term is the only region deformation (correctives stay out of
    the larynx region), and the per-frame energy in tau is piecewise quadratic
    with texel-scale kinks that stall line searches. A dense vertical scan
    with a parabolic refine and the closed-form optimal eta is robust; the
    joint gradient stage then reconciles the temporal terms.
    """
    from .uvmap import gather_rows_torch, texel_indices

    engine = _Engine(model, torch.float64)
    w_t = torch.from_numpy(np.asarray(weights_np, dtype=np.float64))
    lar = model.larynx
    h = lar.resolution[0]
    region = torch.from_numpy(lar.region_vertices)
    rows_all, cols_all = texel_indices(model.template.uv, lar.resolution)
    rows = torch.from_numpy(rows_all[lar.region_vertices])
    cols = torch.from_numpy(cols_all[lar.region_vertices])
    tau_max = model.tau_max
    step = grid_step_texels / h
    grid = torch.arange(-tau_max, tau_max + step, step, dtype=torch.float64)

    for st in clip_state:
        clip: SequenceClip = st["clip"]
        beta = torch.from_numpy(clip.beta)
        combo = engine.lar_mean + torch.einsum(
            "c,chwd->hwd", beta[: engine.lar_maps.shape[0]], engine.lar_maps
        )
        samples = gather_rows_torch(combo[None], rows, cols, grid * h)[:, 0]  # (G, Vr, 3)
        den = samples.pow(2).sum(dim=(1, 2)).clamp_min(1e-30)  # (G,)

        base = engine.base_rest(beta)
        joints = engine.joints(beta)
        theta = st["theta"].detach().double()
        zero = torch.zeros(theta.shape[0], dtype=torch.float64)
        skin0 = engine.frames(
            base, joints, w_t, beta, st["psi"].detach().double(), theta, zero, zero,
            exp_deltas_t[clip.subject].detach().double(),
            pose_sets_t[clip.subject].detach().double(),
        )
        residual = (torch.from_numpy(clip.targets) - skin0)[:, region]  # (B, Vr, 3)
        blend = engine.blend_matrices(w_t, theta, joints)[:, region]
        rest_residual = torch.linalg.solve(blend, residual[..., None]).squeeze(-1)

        num = torch.einsum("gvd,bvd->bg", samples, rest_residual)
        score = torch.clamp(num, min=0.0).pow(2) / den[None, :]
        best = score.argmax(dim=1)
        # parabolic refinement of the vertical position around the peak
        b0 = best.clamp(1, len(grid) - 2)
        sm = score.gather(1, (b0 - 1)[:, None]).squeeze(1)
        s0 = score.gather(1, b0[:, None]).squeeze(1)
        sp = score.gather(1, (b0 + 1)[:, None]).squeeze(1)
        denom = (sm - 2 * s0 + sp).clamp(max=-1e-30)
        frac = (0.5 * (sm - sp) / denom).clamp(-0.5, 0.5)
        tau_star = (grid[b0] + frac * step).clamp(-tau_max, tau_max)
        final = gather_rows_torch(combo[None], rows, cols, tau_star * h)[:, 0]
        num_f = torch.einsum("bvd,bvd->b", final, rest_residual)
        den_f = final.pow(2).sum(dim=(1, 2)).clamp_min(1e-30)
        eta_star = (num_f / den_f).clamp(0.0, 2.0)
        with torch.no_grad():
            st["tau"].copy_(tau_star.to(st["tau"].dtype))
            st["eta"].copy_(eta_star.to(st["eta"].dtype))


def _warm_start_frame_params(
    model: HeadNeckModel,
    clip_state: list[dict],
    exp_deltas_t: dict[str, torch.Tensor],
    pose_sets_t: dict[str, torch.Tensor],
    prior_weights: np.ndarray,
    cfg: "DynamicConfig",
) -> None:
    """L-BFGS solve of each clip's per-frame parameters, everything else
    frozen at its initial value (float64). Writes results back in place."""
    engine = _Engine(model, torch.float64)
    w_t = torch.from_numpy(np.asarray(prior_weights, dtype=np.float64))
    wc = cfg.weights
    for st in clip_state:
        clip: SequenceClip = st["clip"]
        beta = torch.from_numpy(clip.beta)
        base = engine.base_rest(beta)
        joints = engine.joints(beta)
        targets = torch.from_numpy(clip.targets)
        exp_d = exp_deltas_t[clip.subject].detach().double()
        pose_d = pose_sets_t[clip.subject].detach().double()
        free = {
            key: st[key].detach().double().clone().requires_grad_(True)
            for key in ("theta", "psi", "eta", "tau")
        }
        opt = torch.optim.LBFGS(
            list(free.values()),
            max_iter=cfg.warm_start_iters,
            history_size=30,
            tolerance_grad=1e-12,
            tolerance_change=1e-15,
            line_search_fn="strong_wolfe",
        )

        def closure():
            opt.zero_grad()
            skinned = engine.frames(
                base, joints, w_t, beta, free["psi"], free["theta"],
                free["eta"], free["tau"], exp_d, pose_d,
            )
            loss = wc.w_rec * (skinned - targets).pow(2).sum()
            loss = loss + wc.w_rot * limit_excess_torch(free["theta"], engine.bounds).sum()
            loss = loss + wc.w_sim * adjacent_similarity_torch(free["theta"]).sum()
            loss = loss + wc.w_col * engine.collision(
                skinned, free["theta"], joints, cfg.collision_radius
            )
            loss = loss + wc.w_tem * _clip_temporal(
                cfg.temporal, free["psi"], free["theta"], free["eta"], free["tau"]
            )
            loss.backward()
            return loss

        opt.step(closure)
        with torch.no_grad():
            for key in ("theta", "psi", "eta", "tau"):
                st[key].copy_(free[key].detach().to(st[key].dtype))


def learn_dynamic(
    model: HeadNeckModel,
    clips: list[SequenceClip],
    prior_weights: np.ndarray,
    config: DynamicConfig | None = None,
    pose_set_init: dict[str, np.ndarray] | None = None,
    epoch_callback=None,
) -> DynamicResult:
    """Jointly estimate per-frame parameters, per-subject pose correctives and
    the shared skinning weights by minimizing the combined objective; then
    train the pose mapping network on the converged per-subject sets.
    """
    cfg = config or DynamicConfig()
    if not clips:
        raise LearningError("no clips")
    for c in clips:
        if c.targets is None:
            raise LearningError(f"clip {c.subject!r} has no target meshes")
        if c.targets.shape[1:] != (model.n_vertices, 3):
            raise LearningError(
                f"clip {c.subject!r} targets have shape {c.targets.shape[1:]}, "
                f"model expects ({model.n_vertices}, 3)"
            )
    if model.limits is None:
        raise LearningError("model has no rotation limits table")
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    torch.manual_seed(cfg.seed)
    engine = _Engine(model, dtype)
    n = model.n_vertices
    k = model.n_joints
    n_corr = model.n_pose_correctives

    lap_t = laplacian_torch(graph_laplacian(model.template), dtype)
    prior = np.asarray(prior_weights, dtype=np.float64)
    support = np.nonzero(prior.ravel() > 0)
    w_rows, w_cols = np.unravel_index(support[0], prior.shape)
    w_vals = torch.tensor(prior[w_rows, w_cols], dtype=dtype, requires_grad=cfg.optimize_weights)
    w_rows_t = torch.from_numpy(w_rows)
    w_cols_t = torch.from_numpy(w_cols)
    prior_t = torch.from_numpy(prior).to(dtype)

    def dense_weights() -> torch.Tensor:
        w = torch.zeros((n, k), dtype=dtype)
        return w.index_put((w_rows_t, w_cols_t), w_vals)

    subjects = sorted({c.subject for c in clips})
    pose_sets_t: dict[str, torch.Tensor] = {}
    for s in subjects:
        init = (
            pose_set_init[s]
            if pose_set_init is not None and s in pose_set_init
            else np.zeros((n_corr, 3 * n))
        )
        pose_sets_t[s] = torch.tensor(init, dtype=dtype, requires_grad=cfg.optimize_pose_sets)

    clip_state = []
    exp_deltas_t: dict[str, torch.Tensor] = {}
    for c in clips:
        beta_t = torch.from_numpy(c.beta).to(dtype)
        if c.subject not in exp_deltas_t:
            deltas = model.expression_set(c.beta).deltas
            exp_deltas_t[c.subject] = torch.tensor(
                deltas, dtype=dtype, requires_grad=cfg.fine_tune_expressions
            )
        clip_state.append(
            {
                "clip": c,
                "beta": beta_t,
                "base": engine.base_rest(beta_t),
                "joints": engine.joints(beta_t),
                "targets": torch.from_numpy(c.targets).to(dtype),
                "theta": torch.tensor(c.theta, dtype=dtype, requires_grad=True),
                "psi": torch.tensor(c.psi, dtype=dtype, requires_grad=True),
                "eta": torch.tensor(c.eta, dtype=dtype, requires_grad=True),
                "tau": torch.tensor(c.tau, dtype=dtype, requires_grad=True),
            }
        )

    if cfg.warm_start_iters > 0:
        for _ in range(cfg.warm_start_rounds):
            _warm_start_frame_params(model, clip_state, exp_deltas_t, pose_sets_t, prior, cfg)
            _solve_larynx_params(model, clip_state, exp_deltas_t, pose_sets_t, prior)
            if cfg.optimize_pose_sets:
                _solve_pose_sets(model, clip_state, exp_deltas_t, pose_sets_t, prior)

    params: list[torch.Tensor] = []
    for st in clip_state:
        params += [st["theta"], st["psi"], st["eta"], st["tau"]]
    if cfg.optimize_pose_sets:
        params += list(pose_sets_t.values())
    if cfg.optimize_weights:
        params.append(w_vals)
    if cfg.fine_tune_expressions:
        params += list(exp_deltas_t.values())

    # amsgrad: full-batch Adam otherwise limit-cycles in the stiffest
    # directions once gradients shrink (steps stay ~lr)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, amsgrad=True)
    weights_cfg = cfg.weights
    max_epochs = cfg.full_budget_epochs if cfg.full_budget else cfg.epochs
    lr_span = max(cfg.learning_rate - cfg.lr_final, 0.0)

    def epoch_lr(epoch: int) -> float:
        return cfg.lr_final + 0.5 * lr_span * (1.0 + np.cos(np.pi * epoch / max(max_epochs - 1, 1)))

    history: list[dict[str, float]] = []
    log_lines: list[str] = ["epoch\t" + "\t".join(LOSS_TERMS) + "\ttotal"]
    best_total = np.inf
    best_state: dict | None = None
    stale = 0

    larynx_region = torch.from_numpy(model.larynx.region_vertices)

    def project_weights():
        if cfg.optimize_pose_sets:
            # structural constraint: correctives vanish inside the larynx
            # region, whose dynamics the larynx function owns
            with torch.no_grad():
                for s in subjects:
                    pose_sets_t[s].reshape(n_corr, n, 3)[:, larynx_region] = 0.0
        if not cfg.optimize_weights:
            return
        with torch.no_grad():
            w_vals.clamp_(min=0.0)
            sums = torch.zeros(n, dtype=dtype).index_add(0, w_rows_t, w_vals)
            bad = sums <= 0
            if bad.any():
                prior_vals = prior_t[w_rows_t, w_cols_t]
                row_bad = bad[w_rows_t]
                w_vals[row_bad] = prior_vals[row_bad]
                sums = torch.zeros(n, dtype=dtype).index_add(0, w_rows_t, w_vals)
            w_vals.div_(sums[w_rows_t])

    for epoch in range(max_epochs):
        opt.zero_grad()
        terms = {name: torch.zeros((), dtype=dtype) for name in LOSS_TERMS}
        w_dense = dense_weights()
        for st in clip_state:
            c: SequenceClip = st["clip"]
            skinned = engine.frames(
                st["base"],
                st["joints"],
                w_dense,
                st["beta"],
                st["psi"],
                st["theta"],
                st["eta"],
                st["tau"],
                exp_deltas_t[c.subject],
                pose_sets_t[c.subject],
            )
            terms["rec"] = terms["rec"] + (skinned - st["targets"]).pow(2).sum()
            terms["rot"] = terms["rot"] + limit_excess_torch(st["theta"], engine.bounds).sum()
            terms["sim"] = terms["sim"] + adjacent_similarity_torch(st["theta"]).sum()
            terms["col"] = terms["col"] + engine.collision(
                skinned, st["theta"], st["joints"], cfg.collision_radius
            )
            terms["tem"] = terms["tem"] + _clip_temporal(
                cfg.temporal, st["psi"], st["theta"], st["eta"], st["tau"]
            )
        for s in subjects:
            fields = pose_sets_t[s].reshape(n_corr, n, 3).permute(1, 0, 2).reshape(n, -1)
            terms["smo"] = terms["smo"] + smoothness_energy_torch(lap_t, fields)
        terms["ski"] = terms["ski"] + (w_dense - prior_t).pow(2).sum()

        total = sum(w * terms[name] for name, w in zip(LOSS_TERMS, weights_cfg.as_tuple()))
        value = float(total.detach())
        if not np.isfinite(value):
            raise LearningError(f"dynamic objective diverged at epoch {epoch}")
        entry = {name: float(terms[name]) for name in LOSS_TERMS}
        entry["total"] = value
        history.append(entry)
        log_lines.append(
            f"{epoch}\t" + "\t".join(f"{entry[name]:.10g}" for name in LOSS_TERMS) + f"\t{value:.10g}"
        )
        if value < best_total * (1.0 - 1e-9):
            best_total = value
            best_state = {
                "clips": [
                    {key: st[key].detach().clone() for key in ("theta", "psi", "eta", "tau")}
                    for st in clip_state
                ],
                "pose": {s: pose_sets_t[s].detach().clone() for s in subjects},
                "w": w_vals.detach().clone(),
                "exp": {s: exp_deltas_t[s].detach().clone() for s in subjects},
            }
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
        total.backward()
        lr_now = epoch_lr(epoch)
        for group in opt.param_groups:
            group["lr"] = lr_now
        opt.step()
        project_weights()
        if epoch_callback is not None:
            epoch_callback(epoch, clip_state)

    if best_state is not None:
        with torch.no_grad():
            for st, saved in zip(clip_state, best_state["clips"]):
                for key in ("theta", "psi", "eta", "tau"):
                    st[key].copy_(saved[key])
            for s in subjects:
                pose_sets_t[s].copy_(best_state["pose"][s])
                exp_deltas_t[s].copy_(best_state["exp"][s])
            w_vals.copy_(best_state["w"])

    if cfg.final_polish and cfg.warm_start_iters > 0:
        final_w = dense_weights().detach().double().numpy()
        _solve_larynx_params(model, clip_state, exp_deltas_t, pose_sets_t, final_w)
        if cfg.optimize_pose_sets:
            _solve_pose_sets(model, clip_state, exp_deltas_t, pose_sets_t, final_w)
        _warm_start_frame_params(model, clip_state, exp_deltas_t, pose_sets_t, final_w, cfg)

    out_clips = []
    for st in clip_state:
        c: SequenceClip = st["clip"]
        out_clips.append(
            replace(
                c,
                theta=st["theta"].detach().double().numpy(),
                psi=st["psi"].detach().double().numpy(),
                eta=st["eta"].detach().double().numpy(),
                tau=st["tau"].detach().double().numpy(),
            )
        )
    pose_sets = {
        s: BlendshapeSet(deltas=pose_sets_t[s].detach().double().numpy(), kind="pose")
        for s in subjects
    }
    final_w = dense_weights().detach().double().numpy()

    pose_space = pose_net = None
    if len(subjects) >= 2:
        flat = np.stack([pose_sets[s].deltas.ravel() for s in subjects])
        keep = min(cfg.pose_pcs, len(subjects) - 1)
        pose_space = fit_pca(flat, keep=keep)
        beta_by_subject = {c.subject: c.beta for c in clips}
        pose_net = train_mapping_network(
            [(beta_by_subject[s], pose_sets[s]) for s in subjects], pose_space, cfg.mapping
        )
    else:
        warnings.warn("need at least 2 subjects to build the pose blendshape space")

    return DynamicResult(
        clips=out_clips,
        pose_sets=pose_sets,
        skin_weights=final_w,
        pose_space=pose_space,
        pose_net=pose_net,
        history=history,
        log_lines=log_lines,
    )


# --- parameter fitting -------------------------------------------------------


@dataclass
class FitConfig:
    scan_to_mesh_weight: float = 2.0
    landmark_weight: float = 0.01
    shape_reg_weight: float = 0.00005
    adam_iters: int = 400
    adam_lr: float = 0.05
    lbfgs_iters: int = 150
    icp_refresh: int = 10  # re-match nearest points every this many iters (scan mode)
    seed: int = 0


@dataclass
class FitResult:
    params: FullParams
    mean_distance_mm: float
    converged: bool
    history: list[float]


ALL_GROUPS = ("beta", "psi", "theta", "eta", "tau")


def fit_to_target(
    model: HeadNeckModel,
    target: Mesh | np.ndarray,
    init: FullParams,
    free: tuple[str, ...] = ALL_GROUPS,
    config: FitConfig | None = None,
    landmarks: tuple[np.ndarray, np.ndarray] | None = None,
) -> FitResult:
    """Fit parameters so the forward mesh matches the target.

    target: a Mesh with the model topology (known correspondence) or an (P, 3)
    point cloud (nearest-vertex correspondence, re-matched as the fit
    progresses). landmarks: (vertex_indices, target_points) for the optional
    landmark term. The returned residual is the mean per-vertex (or per-point)
    distance in millimeters.
    """
    cfg = config or FitConfig()
    unknown = set(free) - set(ALL_GROUPS)
    if unknown:
        raise LearningError(f"unknown parameter groups {sorted(unknown)}")
    engine = _Engine(model, torch.float64)

    mesh_mode = isinstance(target, Mesh)
    if mesh_mode:
        if target.topology_id != model.template.topology_id:
            raise LearningError("target topology does not match the model template")
        target_v = torch.from_numpy(target.vertices)
    else:
        pts = np.asarray(target, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or not len(pts):
            raise LearningError("point cloud target must be a non-empty (P, 3) array")
        target_v = torch.from_numpy(pts)

    state = {
        "beta": torch.tensor(init.beta, dtype=torch.float64, requires_grad="beta" in free),
        "psi": torch.tensor(init.psi, dtype=torch.float64, requires_grad="psi" in free),
        "theta": torch.tensor(init.theta, dtype=torch.float64, requires_grad="theta" in free),
        "eta": torch.tensor([init.eta], dtype=torch.float64, requires_grad="eta" in free),
        "tau": torch.tensor([init.tau], dtype=torch.float64, requires_grad="tau" in free),
    }
    weights_t = torch.from_numpy(model.skin_weights)
    lmk_idx = lmk_pts = None
    if landmarks is not None:
        lmk_idx = torch.from_numpy(np.asarray(landmarks[0], dtype=np.int64))
        lmk_pts = torch.from_numpy(np.asarray(landmarks[1], dtype=np.float64))

    correspondence: torch.Tensor | None = None

    def skinned_vertices() -> torch.Tensor:
        base = engine.base_rest(state["beta"])
        joints = engine.joints(state["beta"])
        return engine.frames(
            base,
            joints,
            weights_t,
            state["beta"],
            state["psi"][None].reshape(1, -1),
            state["theta"][None],
            state["eta"],
            state["tau"],
            engine.exp_deltas(state["beta"]),
            engine.pose_deltas(state["beta"]),
        )[0]

    def data_residual(verts: torch.Tensor) -> torch.Tensor:
        # summed squared distances (mm^2); the tiny shape regularizer is scaled
        # against sums, matching the fitting recipe the default weights come from
        if mesh_mode:
            return (verts - target_v).pow(2).sum()
        return (verts[correspondence] - target_v).pow(2).sum()

    def objective() -> torch.Tensor:
        verts = skinned_vertices()
        loss = cfg.scan_to_mesh_weight * data_residual(verts)
        if lmk_idx is not None:
            loss = loss + cfg.landmark_weight * (verts[lmk_idx] - lmk_pts).pow(2).sum()
        loss = loss + cfg.shape_reg_weight * state["beta"].pow(2).sum()
        return loss

    def refresh_correspondence():
        nonlocal correspondence
        if mesh_mode:
            return
        with torch.no_grad():
            verts = skinned_vertices()
            correspondence = torch.cdist(target_v, verts).argmin(dim=1)

    history: list[float] = []
    free_params = [state[g] for g in ALL_GROUPS if g in free]
    if not free_params:
        verts = skinned_vertices().detach()
        if not mesh_mode:
            refresh_correspondence()
            verts = verts[correspondence]
        dist = float((verts - target_v).pow(2).sum(-1).sqrt().mean())
        return FitResult(params=init, mean_distance_mm=dist, converged=True, history=[])

    refresh_correspondence()
    opt = torch.optim.Adam(free_params, lr=cfg.adam_lr)
    for it in range(cfg.adam_iters):
        if not mesh_mode and it and it % cfg.icp_refresh == 0:
            refresh_correspondence()
        opt.zero_grad()
        loss = objective()
        history.append(float(loss))
        loss.backward()
        opt.step()

    if cfg.lbfgs_iters > 0:
        refresh_correspondence()
        lbfgs = torch.optim.LBFGS(
            free_params,
            max_iter=cfg.lbfgs_iters,
            tolerance_grad=1e-14,
            tolerance_change=1e-16,
            line_search_fn="strong_wolfe",
        )

        def closure():
            lbfgs.zero_grad()
            loss = closure_loss()
            loss.backward()
            return loss

        def closure_loss():
            loss = objective()
            history.append(float(loss))
            return loss

        lbfgs.step(closure)

    with torch.no_grad():
        verts = skinned_vertices()
        if mesh_mode:
            dist = float((verts - target_v).pow(2).sum(-1).sqrt().mean())
        else:
            refresh_correspondence()
            dist = float((verts[correspondence] - target_v).pow(2).sum(-1).sqrt().mean())
    fitted = FullParams(
        beta=state["beta"].detach().numpy(),
        psi=state["psi"].detach().numpy(),
        theta=state["theta"].detach().numpy(),
        eta=float(state["eta"].detach()),
        tau=float(state["tau"].detach()),
    )
    converged = bool(len(history) >= 2 and history[-1] <= history[0])
    return FitResult(params=fitted, mean_distance_mm=dist, converged=converged, history=history)


# --- gradient verification ----------------------------------------------------


@dataclass
class GradientReport:
    max_rel_error: float
    per_group: dict[str, float]
    notes: list[str]


def _total_objective_torch(
    engine: _Engine,
    clip: SequenceClip,
    state: dict[str, torch.Tensor],
    pose_deltas: torch.Tensor,
    weights_t: torch.Tensor,
    prior_t: torch.Tensor,
    targets: torch.Tensor,
    lap_t: torch.Tensor,
    weights_cfg: LossWeights,
    temporal_cfg: TemporalConfig,
    radius: float,
) -> torch.Tensor:
    base = engine.base_rest(state["beta"])
    joints = engine.joints(state["beta"])
    skinned = engine.frames(
        base, joints, weights_t, state["beta"], state["psi"], state["theta"],
        state["eta"], state["tau"], state["exp"], pose_deltas,
    )
    n = engine.model.n_vertices
    n_corr = engine.model.n_pose_correctives
    terms = {
        "rec": (skinned - targets).pow(2).sum(),
        "rot": limit_excess_torch(state["theta"], engine.bounds).sum(),
        "sim": adjacent_similarity_torch(state["theta"]).sum(),
        "col": engine.collision(skinned, state["theta"], joints, radius),
        "tem": _clip_temporal(temporal_cfg, state["psi"], state["theta"], state["eta"], state["tau"]),
        "smo": smoothness_energy_torch(
            lap_t, pose_deltas.reshape(n_corr, n, 3).permute(1, 0, 2).reshape(n, -1)
        ),
        "ski": (weights_t - prior_t).pow(2).sum(),
    }
    return sum(w * terms[name] for name, w in zip(LOSS_TERMS, weights_cfg.as_tuple()))


def objective_gradient_check(
    model: HeadNeckModel,
    clip: SequenceClip,
    *,
    h: float = 1e-5,
    weights_cfg: LossWeights | None = None,
    temporal_cfg: TemporalConfig | None = None,
    max_checks_per_group: int = 12,
    rng: np.random.Generator | None = None,
    perturb_scale: float = 1.0,
) -> GradientReport:
    """Compare autograd gradients of the total objective against central
    finite differences over all free parameter groups.

    The clip parameters are jittered away from any fixed point first (a
    stationary configuration has near-zero gradients that drown in the finite
    difference cancellation noise). Steps scale with the coordinate magnitude;
    coordinates whose analytic and FD gradients both sit below the
    cancellation noise floor are skipped as non-informative, as are theta
    coordinates at a rotation-limit kink.
    """
    if clip.targets is None:
        raise LearningError("gradient check needs a clip with targets")
    rng = rng or np.random.default_rng(0)
    weights_cfg = weights_cfg or LossWeights()
    temporal_cfg = temporal_cfg or TemporalConfig()
    engine = _Engine(model, torch.float64)
    lap_t = laplacian_torch(graph_laplacian(model.template), torch.float64)
    prior_t = torch.from_numpy(model.skin_weights)
    pose_set = model.pose_set(clip.beta)
    pose_deltas0 = (
        pose_set.deltas if pose_set is not None else np.zeros((model.n_pose_correctives, 3 * model.n_vertices))
    )
    exp_deltas0 = model.expression_set(clip.beta).deltas
    targets = torch.from_numpy(clip.targets)

    s = perturb_scale
    arrays = {
        "beta": clip.beta + s * rng.normal(scale=2.0, size=clip.beta.shape),
        "psi": np.clip(clip.psi + s * rng.normal(scale=0.05, size=clip.psi.shape), 0.0, 1.5),
        "theta": clip.theta + s * rng.normal(scale=0.02, size=clip.theta.shape),
        "eta": clip.eta + s * rng.normal(scale=0.03, size=clip.eta.shape),
        "tau": clip.tau + s * rng.normal(scale=0.002, size=clip.tau.shape),
        "exp": exp_deltas0 + s * rng.normal(scale=0.02, size=exp_deltas0.shape),
        "pose_deltas": pose_deltas0 + s * rng.normal(scale=0.01, size=pose_deltas0.shape),
        "weights": np.clip(
            model.skin_weights + s * rng.normal(scale=0.01, size=model.skin_weights.shape), 0.0, None
        ),
    }

    notes: list[str] = []
    from .rotations import axis_angle_to_matrix, matrix_to_euler_xyz

    euler = matrix_to_euler_xyz(axis_angle_to_matrix(torch.from_numpy(arrays["theta"]))).numpy()
    margin = np.minimum(
        np.abs(euler - model.limits.bounds[None, :, :, 0]),
        np.abs(model.limits.bounds[None, :, :, 1] - euler),
    )
    if margin.min() < 10 * h:
        notes.append("non-smooth point: a pose sits at a rotation limit; theta check skipped there")

    def evaluate(current: dict[str, np.ndarray], needs_grad: bool = False):
        state = {
            key: torch.tensor(current[key], dtype=torch.float64, requires_grad=needs_grad)
            for key in ("beta", "psi", "theta", "eta", "tau", "exp")
        }
        pose_t = torch.tensor(current["pose_deltas"], dtype=torch.float64, requires_grad=needs_grad)
        weights_t = torch.tensor(current["weights"], dtype=torch.float64, requires_grad=needs_grad)
        total = _total_objective_torch(
            engine, clip, state, pose_t, weights_t, prior_t, targets, lap_t,
            weights_cfg, temporal_cfg, radius=8.0,
        )
        if needs_grad:
            total.backward()
            grads = {key: state[key].grad.numpy().copy() for key in state}
            grads["pose_deltas"] = pose_t.grad.numpy().copy() if pose_t.grad is not None else np.zeros_like(current["pose_deltas"])
            grads["weights"] = weights_t.grad.numpy().copy()
            return float(total.detach()), grads
        return float(total.detach())

    total0, grads = evaluate(arrays, needs_grad=True)

    # The objective is exactly quadratic along the linear-path groups, so
    # large FD steps carry no truncation error there and beat cancellation;
    # theta (Rodrigues) and tau (texel-piecewise) need small steps instead.
    group_step = {
        "beta": 1e-4, "psi": 1e-4, "theta": h, "eta": 1e-4, "tau": 1e-6,
        "exp": 1e-2, "pose_deltas": 1e-2, "weights": 1e-3,
    }
    per_group: dict[str, float] = {}
    skipped = 0
    for group, arr in arrays.items():
        flat = arr.reshape(-1)
        g_flat = grads[group].reshape(-1)
        count = min(max_checks_per_group, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for i in idx:
            if group == "theta":
                frame, rest = divmod(int(i), arr.size // arr.shape[0])
                j, _ = divmod(rest, 3)
                if margin[frame, j].min() < 10 * h:
                    skipped += 1
                    continue
            step = group_step[group] * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate(arrays)
            flat[i] = orig - step
            down = evaluate(arrays)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            noise_floor = 100.0 * np.finfo(np.float64).eps * abs(total0) / step
            if max(abs(fd), abs(g_flat[i])) < noise_floor:
                skipped += 1
                continue
            denom = max(abs(fd), abs(g_flat[i]))
            worst = max(worst, abs(fd - g_flat[i]) / denom)
        per_group[group] = worst
    if skipped:
        notes.append(f"{skipped} coordinates skipped (noise floor or limit kink)")
    return GradientReport(
        max_rel_error=max(per_group.values()), per_group=per_group, notes=notes
    )
