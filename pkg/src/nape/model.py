"""The assembled head-and-neck model: parameters in, posed mesh out.

Composition order is fixed everywhere: identity terms first (template + shape
+ larynx), then expression, then pose correctives, then skinning about the
identity's regressed joints. Retargeting reuses the exact same composition,
so self-retargeting is bitwise identical to forward().
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blendshapes import (
    BlendshapeSet,
    MappingNetwork,
    expression_offset,
    personalize_blendshapes,
    pose_offset,
    synthesize_shape,
    validate_psi,
)
from .larynx import LarynxBasis, LarynxParams, larynx_displacement
from .mesh import Mesh, load_obj, save_obj
from .pca import PcaSpace, reconstruct
from .skeleton import (
    JointRegressor,
    RotationLimits,
    Skeleton,
    linear_blend_skin,
    load_limits,
    regress_joints,
    rotation_limit_energy,
    save_limits,
    validate_pose,
    validate_weights,
)
from .tensorio import read_tensor, write_tensor

FORMAT_NAME = "nape-model"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class LimitsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FullParams:
    """One full control-parameter set (beta, psi, theta, eta, tau, alpha)."""

    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    eta: float = 0.0
    tau: float = 0.0
    alpha: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).ravel())
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=np.float64).ravel())
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(-1, 3))
        if self.alpha is not None:
            object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64).ravel())

    @classmethod
    def zeros(cls, n_shape: int, n_expressions: int, n_joints: int) -> "FullParams":
        return cls(
            beta=np.zeros(n_shape),
            psi=np.zeros(n_expressions),
            theta=np.zeros((n_joints, 3)),
            eta=0.0,
            tau=0.0,
        )


@dataclass(frozen=True)
class AppearanceSpace:
    """Joint PCA over the stacked texture channels (diffuse, specular, normal)."""

    space: PcaSpace
    resolution: tuple[int, int]
    channels: tuple[str, ...] = ("diffuse", "specular", "normal")

    def __post_init__(self):
        h, w = self.resolution
        expected = len(self.channels) * h * w * 3
        if self.space.dim != expected:
            raise ModelError(
                f"appearance space dim {self.space.dim} != channels*H*W*3 = {expected}"
            )


@dataclass(frozen=True)
class HeadNeckModel:
    template: Mesh  # larynx-removed rest pose, mean shape
    shape_space: PcaSpace
    joint_regressor: JointRegressor
    skeleton: Skeleton
    skin_weights: np.ndarray
    exp_space: PcaSpace
    exp_net: MappingNetwork
    n_expressions: int
    larynx: LarynxBasis
    limits: RotationLimits
    pose_space: PcaSpace | None = None
    pose_net: MappingNetwork | None = None
    appearance: AppearanceSpace | None = None
    tau_max: float = 0.1

    def __post_init__(self):
        n = self.template.n_vertices
        k = self.skeleton.n_joints
        object.__setattr__(
            self, "skin_weights", validate_weights(self.skin_weights, n, k)
        )
        if self.shape_space.dim != 3 * n:
            raise ModelError(
                f"dimension mismatch: shape_space.dim={self.shape_space.dim} vs template 3N={3 * n}"
            )
        if self.joint_regressor.n_joints != k:
            raise ModelError(
                f"dimension mismatch: joint_regressor K={self.joint_regressor.n_joints} vs skeleton K={k}"
            )
        if self.exp_space.dim != self.n_expressions * 3 * n:
            raise ModelError(
                f"dimension mismatch: exp_space.dim={self.exp_space.dim} vs |psi|*3N={self.n_expressions * 3 * n}"
            )
        if (self.pose_space is None) != (self.pose_net is None):
            raise ModelError("pose_space and pose_net must be given together")
        if self.pose_space is not None and self.pose_space.dim != 9 * (k - 1) * 3 * n:
            raise ModelError(
                f"dimension mismatch: pose_space.dim={self.pose_space.dim} vs 9(K-1)*3N={9 * (k - 1) * 3 * n}"
            )
        if self.limits.bounds.shape[0] != k:
            raise ModelError("limits table does not match joint count")

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    @property
    def n_shape(self) -> int:
        return self.joint_regressor.n_shape

    @property
    def n_pose_correctives(self) -> int:
        return 9 * (self.n_joints - 1)

    def zero_params(self) -> FullParams:
        return FullParams.zeros(self.n_shape, self.n_expressions, self.n_joints)

    def expression_set(self, beta: np.ndarray) -> BlendshapeSet:
        return personalize_blendshapes(self.exp_net, self.exp_space, beta, self.n_expressions, "expression")

    def pose_set(self, beta: np.ndarray) -> BlendshapeSet | None:
        if self.pose_net is None:
            return None
        return personalize_blendshapes(self.pose_net, self.pose_space, beta, self.n_pose_correctives, "pose")

    def validate_params(self, params: FullParams) -> None:
        if params.beta.shape[0] != self.n_shape:
            raise ModelError(f"beta must have {self.n_shape} entries, got {params.beta.shape[0]}")
        if params.psi.shape[0] != self.n_expressions:
            raise ModelError(f"psi must have {self.n_expressions} entries, got {params.psi.shape[0]}")
        validate_psi(params.psi)
        validate_pose(params.theta, self.n_joints)
        LarynxParams(eta=params.eta, tau=params.tau, tau_max=self.tau_max)


def identity_rest(model: HeadNeckModel, params: FullParams) -> np.ndarray:
    """Template + shape blendshapes + larynx term; no expression or pose yet."""
    lar = larynx_displacement(
        model.larynx,
        model.template,
        LarynxParams(eta=params.eta, tau=params.tau, tau_max=model.tau_max),
        params.beta,
    )
    return model.template.vertices + synthesize_shape(model.shape_space, params.beta) + lar


def rest_template(model: HeadNeckModel, params: FullParams) -> Mesh:
    """Personalized rest-pose mesh: all blendshape offsets, no skinning."""
    model.validate_params(params)
    verts = identity_rest(model, params)
    verts = verts + expression_offset(model.expression_set(params.beta), params.psi)
    pose_set = model.pose_set(params.beta)
    if pose_set is not None:
        verts = verts + pose_offset(pose_set, params.theta)
    return model.template.with_vertices(verts)


def forward(model: HeadNeckModel, params: FullParams, *, strict_limits: bool = False) -> Mesh:
    """Posed mesh: skinning of the personalized rest template about J(beta)."""
    excess = rotation_limit_energy(params.theta, model.limits)
    if excess > 0.0:
        if strict_limits:
            raise ModelError(f"pose violates rotation limits (excess {excess:.6g} rad)")
        warnings.warn(f"pose exceeds rotation limits by {excess:.6g} rad", LimitsWarning)
    rest = rest_template(model, params)
    joints = regress_joints(model.joint_regressor, params.beta)
    skel = replace(model.skeleton, rest_positions=joints)
    return rest.with_vertices(
        linear_blend_skin(rest.vertices, skel, params.theta, model.skin_weights)
    )


def appearance(model: HeadNeckModel, alpha: np.ndarray) -> np.ndarray:
    """Texture stack (channels, H, W, 3) for appearance coefficients alpha."""
    if model.appearance is None:
        raise ModelError("model has no appearance space")
    app = model.appearance
    flat = reconstruct(app.space, np.asarray(alpha, dtype=np.float64))
    return flat.reshape(len(app.channels), app.resolution[0], app.resolution[1], 3)


# --- model archive ---------------------------------------------------------


def _net_tensors(prefix: str, net: MappingNetwork) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}_w{i}"] = w
        out[f"{prefix}_b{i}"] = b
    return out


def _net_from_tensors(prefix: str, tensors: dict[str, np.ndarray], n_layers: int) -> MappingNetwork:
    return MappingNetwork(
        weights=[tensors[f"{prefix}_w{i}"] for i in range(n_layers)],
        biases=[tensors[f"{prefix}_b{i}"] for i in range(n_layers)],
        trained=True,
    )


def save_model(model: HeadNeckModel, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(model.template, out / "template.obj")
    save_limits(model.limits, out / "limits.txt")

    tensors: dict[str, np.ndarray] = {
        "shape_mean": model.shape_space.mean,
        "shape_basis": model.shape_space.basis,
        "shape_variance": model.shape_space.variance_ratio,
        "joint_matrix": model.joint_regressor.matrix,
        "joint_bias": model.joint_regressor.bias,
        "skeleton_rest": model.skeleton.rest_positions,
        "skin_weights": model.skin_weights,
        "exp_mean": model.exp_space.mean,
        "exp_basis": model.exp_space.basis,
        "exp_variance": model.exp_space.variance_ratio,
        "larynx_mean": model.larynx.mean_map,
        "larynx_maps": model.larynx.maps,
        "larynx_mask": model.larynx.mask.astype(np.float64),
        "larynx_variance": model.larynx.variance_ratio,
    }
    tensors.update(_net_tensors("exp_net", model.exp_net))
    if model.pose_space is not None:
        tensors["pose_mean"] = model.pose_space.mean
        tensors["pose_basis"] = model.pose_space.basis
        tensors["pose_variance"] = model.pose_space.variance_ratio
        tensors.update(_net_tensors("pose_net", model.pose_net))
    if model.appearance is not None:
        tensors["appearance_mean"] = model.appearance.space.mean
        tensors["appearance_basis"] = model.appearance.space.basis
        tensors["appearance_variance"] = model.appearance.space.variance_ratio

    entries = {}
    for name in sorted(tensors):
        fname = f"{name}.hck"
        write_tensor(out / fname, tensors[name])
        entries[name] = {"file": fname, "shape": list(np.shape(tensors[name]))}

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": {
            "n_vertices": model.n_vertices,
            "n_joints": model.n_joints,
            "n_shape": model.n_shape,
            "n_expressions": model.n_expressions,
            "n_pose_correctives": model.n_pose_correctives,
            "larynx_components": model.larynx.n_components,
            "uv_height": model.larynx.resolution[0],
            "uv_width": model.larynx.resolution[1],
        },
        "joint_names": list(model.skeleton.joint_names),
        "parents": list(model.skeleton.parents),
        "tau_max": model.tau_max,
        "has_pose_stage": model.pose_space is not None,
        "has_appearance": model.appearance is not None,
        "appearance_channels": list(model.appearance.channels) if model.appearance else [],
        "appearance_resolution": list(model.appearance.resolution) if model.appearance else [],
        "tensors": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_model(model_dir: str | Path) -> HeadNeckModel:
    src = Path(model_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise ModelError(f"{src}: missing manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise ModelError(f"{src}: unknown archive format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelError(
            f"{src}: format version {manifest.get('version')} != supported {FORMAT_VERSION}"
        )
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        path = src / entry["file"]
        if not path.exists():
            raise ModelError(f"{src}: missing tensor file {entry['file']!r} for {name!r}")
        arr = read_tensor(path)
        if list(arr.shape) != entry["shape"]:
            raise ModelError(
                f"{src}: tensor {name!r} has shape {list(arr.shape)}, manifest says {entry['shape']}"
            )
        tensors[name] = arr

    template = load_obj(src / "template.obj")
    dims = manifest["dims"]
    if template.n_vertices != dims["n_vertices"]:
        raise ModelError(
            f"{src}: dimension mismatch between template.obj (N={template.n_vertices}) "
            f"and manifest n_vertices={dims['n_vertices']}"
        )
    if tensors["skin_weights"].shape[0] != template.n_vertices:
        raise ModelError(
            f"{src}: dimension mismatch between fields skin_weights "
            f"(N={tensors['skin_weights'].shape[0]}) and template (N={template.n_vertices})"
        )

    joint_names = tuple(manifest["joint_names"])
    skeleton = Skeleton(
        rest_positions=tensors["skeleton_rest"],
        joint_names=joint_names,
        parents=tuple(manifest["parents"]),
    )
    limits = load_limits(src / "limits.txt", joint_names)

    from .larynx import LarynxBasis  # local import keeps module init order simple
    from .uvmap import texel_indices

    mask = tensors["larynx_mask"] != 0.0
    rows, cols = texel_indices(template.uv, mask.shape)
    region = np.nonzero(mask[rows, cols])[0]
    larynx = LarynxBasis(
        mean_map=tensors["larynx_mean"],
        maps=tensors["larynx_maps"],
        mask=mask,
        region_vertices=region,
        variance_ratio=tensors["larynx_variance"],
    )

    pose_space = pose_net = None
    if manifest["has_pose_stage"]:
        pose_space = PcaSpace(
            mean=tensors["pose_mean"],
            basis=tensors["pose_basis"],
            variance_ratio=tensors["pose_variance"],
        )
        pose_net = _net_from_tensors("pose_net", tensors, 3)
    appearance_space = None
    if manifest["has_appearance"]:
        appearance_space = AppearanceSpace(
            space=PcaSpace(
                mean=tensors["appearance_mean"],
                basis=tensors["appearance_basis"],
                variance_ratio=tensors["appearance_variance"],
            ),
            resolution=tuple(manifest["appearance_resolution"]),
            channels=tuple(manifest["appearance_channels"]),
        )

    return HeadNeckModel(
        template=template,
        shape_space=PcaSpace(
            mean=tensors["shape_mean"],
            basis=tensors["shape_basis"],
            variance_ratio=tensors["shape_variance"],
        ),
        joint_regressor=JointRegressor(matrix=tensors["joint_matrix"], bias=tensors["joint_bias"]),
        skeleton=skeleton,
        skin_weights=tensors["skin_weights"],
        exp_space=PcaSpace(
            mean=tensors["exp_mean"],
            basis=tensors["exp_basis"],
            variance_ratio=tensors["exp_variance"],
        ),
        exp_net=_net_from_tensors("exp_net", tensors, 3),
        n_expressions=dims["n_expressions"],
        larynx=larynx,
        limits=limits,
        pose_space=pose_space,
        pose_net=pose_net,
        appearance=appearance_space,
        tau_max=manifest["tau_max"],
    )
