"""Motion applications: larynx tracking in normal maps, head-orientation to
cervical pose, expression-driven autoregressive larynx prediction, and
cross-species pose transfer onto same-topology rigs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .blendshapes import BlendshapeSet, expression_offset, pose_offset
from .mesh import Mesh
from .model import FullParams, HeadNeckModel, identity_rest
from .skeleton import Skeleton, linear_blend_skin, validate_weights

KERNEL_SIZE = 70


class SynthesisError(ValueError):
    pass


# --- larynx tracking ---------------------------------------------------------


@dataclass(frozen=True)
class TrackResult:
    tau: float  # vertical coordinate of the best response minus tau0
    row: int  # top row of the best window
    col: int
    score: float  # raw correlation response, exposed for thresholding


def track_larynx(frame: np.ndarray, kernel: np.ndarray, tau0: float) -> TrackResult:
    """Raw cross-correlation peak of the kernel over the frame.

    The response at (r, c) is the dot product of the kernel with the window
    whose top-left corner is (r, c); ties break toward the smallest row, then
    the smallest column. Returns the peak's vertical coordinate minus tau0.
    """
    f = np.asarray(frame, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if f.ndim != 3 or k.ndim != 3 or f.shape[2] != k.shape[2]:
        raise SynthesisError(f"frame {f.shape} and kernel {k.shape} must be (H, W, C)")
    if f.shape[0] < k.shape[0] or f.shape[1] < k.shape[1]:
        raise SynthesisError(f"frame {f.shape[:2]} smaller than kernel {k.shape[:2]}")
    f_t = torch.from_numpy(np.ascontiguousarray(f.transpose(2, 0, 1)))[None]
    k_t = torch.from_numpy(np.ascontiguousarray(k.transpose(2, 0, 1)))[None]
    response = torch.nn.functional.conv2d(f_t, k_t)[0, 0].numpy()
    best = np.unravel_index(np.argmax(response), response.shape)  # C-order: smallest row then col
    row, col = int(best[0]), int(best[1])
    return TrackResult(tau=float(row - tau0), row=row, col=col, score=float(response[row, col]))


def track_sequence(frames: np.ndarray, kernel: np.ndarray, tau0: float) -> np.ndarray:
    return np.array([track_larynx(fr, kernel, tau0).tau for fr in frames])


# --- head orientation to cervical pose ----------------------------------------


@dataclass
class OrientationPoseNet:
    """2 x 512 ReLU MLP from the head (o-c1) world rotation to full theta.

    Input is the flattened 3x3 rotation matrix; the output passes through a
    soft clamp that is the identity inside the per-axis limits and saturates
    beyond them.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bounds: np.ndarray  # (K, 3, 2) radians
    trained: bool = False
    loss_history: list[float] = field(default_factory=list, repr=False)

    def raw(self, rotation: np.ndarray) -> np.ndarray:
        x = np.asarray(rotation, dtype=np.float64).reshape(-1)
        if x.shape[0] != 9:
            raise SynthesisError("orientation must be a 3x3 rotation matrix")
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            x = np.maximum(w @ x + b, 0.0)
        return self.weights[-1] @ x + self.biases[-1]


def soft_limit_clamp(theta: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Identity inside [min, max]; excess squashes through tanh (C^1)."""
    t = np.asarray(theta, dtype=np.float64)
    hi = bounds[..., 1]
    lo = bounds[..., 0]
    over = np.maximum(t - hi, 0.0)
    under = np.maximum(lo - t, 0.0)
    clamped = np.clip(t, lo, hi)
    return clamped + np.tanh(over) - np.tanh(under)


def orientation_to_pose(net: OrientationPoseNet, head_rotation: np.ndarray) -> np.ndarray:
    """Predict the 8-joint axis-angle pose from the o-c1 world rotation."""
    if not net.trained:
        raise SynthesisError("orientation network is untrained")
    theta = net.raw(head_rotation).reshape(-1, 3)
    euler_bounds = net.bounds
    # clamp in axis-angle space per component against the euler-sized bounds:
    # axis-angle magnitudes and euler angles coincide for single-axis motion,
    # and the clamp is only a guard rail for extrapolated inputs.
    return soft_limit_clamp(theta, euler_bounds)


@dataclass
class OrientationTrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 4000
    patience: int = 300
    hidden: int = 512
    seed: int = 0


def train_orientation_net(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    bounds: np.ndarray,
    config: OrientationTrainConfig | None = None,
) -> OrientationPoseNet:
    """Fit (head rotation matrix, theta) pairs with a 2-layer 512 MLP."""
    cfg = config or OrientationTrainConfig()
    if not pairs:
        raise SynthesisError("no training pairs")
    x = np.stack([np.asarray(r, dtype=np.float64).reshape(9) for r, _ in pairs])
    y = np.stack([np.asarray(t, dtype=np.float64).reshape(-1) for _, t in pairs])
    torch.manual_seed(cfg.seed)
    net = torch.nn.Sequential(
        torch.nn.Linear(9, cfg.hidden),
        torch.nn.ReLU(),
        torch.nn.Linear(cfg.hidden, cfg.hidden),
        torch.nn.ReLU(),
        torch.nn.Linear(cfg.hidden, y.shape[1]),
    ).double()
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    history = []
    best, best_state, stale = np.inf, None, 0
    for _ in range(cfg.max_epochs):
        opt.zero_grad()
        loss = torch.mean((net(xt) - yt) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise SynthesisError("orientation network diverged")
        history.append(value)
        if value < best - 1e-15:
            best, stale = value, 0
            best_state = [p.detach().clone() for p in net.parameters()]
        else:
            stale += 1
        if stale >= cfg.patience:
            break
        loss.backward()
        opt.step()
    if best_state is not None:
        with torch.no_grad():
            for p, s in zip(net.parameters(), best_state):
                p.copy_(s)
    linears = [m for m in net if isinstance(m, torch.nn.Linear)]
    return OrientationPoseNet(
        weights=[m.weight.detach().numpy().copy() for m in linears],
        biases=[m.bias.detach().numpy().copy() for m in linears],
        bounds=np.asarray(bounds, dtype=np.float64),
        trained=True,
        loss_history=history,
    )


# --- expression-driven larynx sequences ----------------------------------------


class _GruBackbone(torch.nn.Module):
    """2-layer GRU over (psi_k, tau_{k-1}) with a linear readout that also sees
    the raw inputs, so exactly-linear recurrences are representable."""

    def __init__(self, n_psi: int, hidden: int):
        super().__init__()
        self.gru = torch.nn.GRU(n_psi + 1, hidden, num_layers=2, batch_first=True)
        self.head = torch.nn.Linear(hidden + n_psi + 1, 1)

    def forward(self, inputs: torch.Tensor, state=None):
        out, state = self.gru(inputs, state)
        return self.head(torch.cat([out, inputs], dim=-1)).squeeze(-1), state


@dataclass
class PredictorConfig:
    hidden: int = 32
    learning_rate: float = 5e-3
    max_epochs: int = 3000
    patience: int = 400
    seed: int = 0


@dataclass
class LarynxPredictor:
    """Autoregressive psi -> tau sequence model (gated recurrent backbone)."""

    module: _GruBackbone
    n_psi: int
    trained: bool = False
    loss_history: list[float] = field(default_factory=list, repr=False)


def train_larynx_predictor(
    clips: list[dict[str, np.ndarray]], config: PredictorConfig | None = None
) -> LarynxPredictor:
    """Teacher-forced training on {"psi": (T, P), "tau": (T,)} clips."""
    cfg = config or PredictorConfig()
    if not clips:
        raise SynthesisError("no training clips")
    n_psi = clips[0]["psi"].shape[1]
    torch.manual_seed(cfg.seed)
    module = _GruBackbone(n_psi, cfg.hidden).double()
    xs, ys = [], []
    for clip in clips:
        psi = np.asarray(clip["psi"], dtype=np.float64)
        tau = np.asarray(clip["tau"], dtype=np.float64)
        if psi.shape[0] != tau.shape[0] or psi.shape[0] < 2:
            raise SynthesisError("clips need aligned psi/tau with at least 2 frames")
        prev = np.concatenate([[tau[0]], tau[:-1]])
        xs.append(np.concatenate([psi, prev[:, None]], axis=1))
        ys.append(tau)
    x = torch.from_numpy(np.stack(xs))
    y = torch.from_numpy(np.stack(ys))
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
    history = []
    best, best_state, stale = np.inf, None, 0
    for _ in range(cfg.max_epochs):
        opt.zero_grad()
        pred, _ = module(x)
        loss = torch.mean((pred - y) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise SynthesisError("larynx predictor diverged")
        history.append(value)
        if value < best - 1e-16:
            best, stale = value, 0
            best_state = [p.detach().clone() for p in module.parameters()]
        else:
            stale += 1
        if stale >= cfg.patience:
            break
        loss.backward()
        opt.step()
    if best_state is not None:
        with torch.no_grad():
            for p, s in zip(module.parameters(), best_state):
                p.copy_(s)
    return LarynxPredictor(module=module, n_psi=n_psi, trained=True, loss_history=history)


def predict_larynx_sequence(
    predictor: LarynxPredictor, psi_sequence: np.ndarray, history: np.ndarray | None = None
) -> np.ndarray:
    """Autoregressive rollout: each step consumes psi(k) and tau_hat(k-1).

    ``history`` seeds past tau values (its last entry is tau_hat(0-1)); by
    default the rollout starts from tau = 0. Deterministic given the trained
    predictor and inputs.
    """
    if not predictor.trained:
        raise SynthesisError("predictor is untrained")
    psi = np.atleast_2d(np.asarray(psi_sequence, dtype=np.float64))
    if psi.shape[0] == 0:
        raise SynthesisError("empty psi sequence")
    if psi.shape[1] != predictor.n_psi:
        raise SynthesisError(f"psi width {psi.shape[1]} != trained width {predictor.n_psi}")
    prev = float(history[-1]) if history is not None and len(history) else 0.0
    state = None
    module = predictor.module
    out = np.empty(psi.shape[0])
    with torch.no_grad():
        if history is not None and len(history) > 1:
            # warm the recurrent state on the provided history
            warm_tau = np.asarray(history, dtype=np.float64)
            warm_psi = np.tile(psi[0], (len(warm_tau) - 1, 1))
            prev_col = warm_tau[:-1][:, None]
            warm_in = torch.from_numpy(np.concatenate([warm_psi, prev_col], axis=1))[None]
            _, state = module(warm_in, None)
        for k in range(psi.shape[0]):
            step = torch.from_numpy(np.concatenate([psi[k], [prev]]))[None, None]
            pred, state = module(step, state)
            prev = float(pred[0, 0])
            out[k] = prev
    return out


# --- cross-species retargeting -------------------------------------------------


@dataclass(frozen=True)
class RigTarget:
    """Rest mesh + skeleton (+ optional blendshapes) sharing the source topology."""

    mesh: Mesh
    skeleton: Skeleton
    skin_weights: np.ndarray
    expression_set: BlendshapeSet | None = None
    pose_set: BlendshapeSet | None = None

    def __post_init__(self):
        validate_weights(self.skin_weights, self.mesh.n_vertices, self.skeleton.n_joints)


def rig_from_model(model: HeadNeckModel, params: FullParams) -> RigTarget:
    """The source model frozen at one identity, as a retarget rig."""
    rest = model.template.with_vertices(identity_rest(model, params))
    skel = replace(
        model.skeleton,
        rest_positions=(model.joint_regressor.bias + model.joint_regressor.matrix @ params.beta).reshape(-1, 3),
    )
    return RigTarget(
        mesh=rest,
        skeleton=skel,
        skin_weights=model.skin_weights,
        expression_set=model.expression_set(params.beta),
        pose_set=model.pose_set(params.beta),
    )


def save_rig(rig: RigTarget, out_dir) -> None:
    import json
    from pathlib import Path

    from .mesh import save_obj
    from .tensorio import write_tensor

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(rig.mesh, out / "mesh.obj")
    write_tensor(out / "skin_weights.hck", rig.skin_weights)
    write_tensor(out / "skeleton_rest.hck", rig.skeleton.rest_positions)
    meta = {
        "format": "nape-rig",
        "joint_names": list(rig.skeleton.joint_names),
        "parents": list(rig.skeleton.parents),
        "has_expression_set": rig.expression_set is not None,
        "has_pose_set": rig.pose_set is not None,
    }
    if rig.expression_set is not None:
        write_tensor(out / "expression_deltas.hck", rig.expression_set.deltas)
    if rig.pose_set is not None:
        write_tensor(out / "pose_deltas.hck", rig.pose_set.deltas)
    (out / "rig.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_rig(src_dir) -> RigTarget:
    import json
    from pathlib import Path

    from .mesh import load_obj
    from .tensorio import read_tensor

    src = Path(src_dir)
    meta_path = src / "rig.json"
    if not meta_path.exists():
        raise SynthesisError(f"{src}: missing rig.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "nape-rig":
        raise SynthesisError(f"{src}: not a rig archive")
    mesh = load_obj(src / "mesh.obj")
    skel = Skeleton(
        rest_positions=read_tensor(src / "skeleton_rest.hck"),
        joint_names=tuple(meta["joint_names"]),
        parents=tuple(meta["parents"]),
    )
    exp_set = pose_set = None
    if meta["has_expression_set"]:
        exp_set = BlendshapeSet(deltas=read_tensor(src / "expression_deltas.hck"), kind="expression")
    if meta["has_pose_set"]:
        pose_set = BlendshapeSet(deltas=read_tensor(src / "pose_deltas.hck"), kind="pose")
    return RigTarget(
        mesh=mesh,
        skeleton=skel,
        skin_weights=read_tensor(src / "skin_weights.hck"),
        expression_set=exp_set,
        pose_set=pose_set,
    )


def retarget_pose(
    source_params: FullParams,
    target: RigTarget,
    source_topology_id: str | None = None,
    source_joint_names: tuple[str, ...] | None = None,
) -> Mesh:
    """Apply source expression and pose parameters to a same-topology rig.

    The composition matches forward() exactly: rest mesh, plus expression and
    pose blendshape offsets when the rig provides them, skinned by the rig's
    skeleton with the source theta.
    """
    if source_topology_id is not None and target.mesh.topology_id != source_topology_id:
        raise SynthesisError("target rig topology does not match the source template")
    if source_joint_names is not None and tuple(target.skeleton.joint_names) != tuple(source_joint_names):
        raise SynthesisError("target rig joint names do not match the source skeleton")
    verts = target.mesh.vertices
    if target.expression_set is not None:
        verts = verts + expression_offset(target.expression_set, source_params.psi)
    if target.pose_set is not None:
        verts = verts + pose_offset(target.pose_set, source_params.theta)
    return target.mesh.with_vertices(
        linear_blend_skin(verts, target.skeleton, source_params.theta, target.skin_weights)
    )
