"""Blendshape sets, parameter-to-offset evaluation, and the identity-conditioned
mapping networks that personalize expression and pose blendshapes.

The mapping networks are shallow MLPs (three linear layers, 64 hidden units,
ReLU) predicting PCA weights over a blendshape-set space; training uses Adam
at learning rate 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .pca import PcaSpace
from .rotations import axis_angle_to_matrix

PSI_MIN, PSI_MAX = 0.0, 1.5


class BlendshapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlendshapeSet:
    """B displacement fields, stored flat as (B, 3N) millimeters."""

    deltas: np.ndarray
    kind: str  # "expression" or "pose"

    def __post_init__(self):
        d = np.ascontiguousarray(self.deltas, dtype=np.float64)
        object.__setattr__(self, "deltas", d)
        if d.ndim != 2 or d.shape[1] % 3:
            raise BlendshapeError(f"deltas must be (B, 3N), got {d.shape}")
        if self.kind not in ("expression", "pose"):
            raise BlendshapeError(f"unknown blendshape kind {self.kind!r}")

    @property
    def count(self) -> int:
        return self.deltas.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.deltas.shape[1] // 3


def synthesize_shape(space: PcaSpace, beta: np.ndarray) -> np.ndarray:
    """Shape displacement sum_i beta_i S_i as (N, 3)."""
    b = np.asarray(beta, dtype=np.float64).ravel()
    if b.shape[0] > space.n_components:
        raise BlendshapeError(f"|beta|={b.shape[0]} exceeds {space.n_components} components")
    return (space.basis[:, : b.shape[0]] @ b).reshape(-1, 3)


def expression_offset(blendshapes: BlendshapeSet, psi: np.ndarray) -> np.ndarray:
    """sum_j psi_j E_j as (N, 3)."""
    p = np.asarray(psi, dtype=np.float64).ravel()
    if p.shape[0] != blendshapes.count:
        raise BlendshapeError(f"|psi|={p.shape[0]} but set has {blendshapes.count} blendshapes")
    return (p @ blendshapes.deltas).reshape(-1, 3)


def validate_psi(psi: np.ndarray) -> np.ndarray:
    p = np.asarray(psi, dtype=np.float64).ravel()
    if np.any(p < PSI_MIN) or np.any(p > PSI_MAX):
        raise BlendshapeError(f"psi must lie in [{PSI_MIN}, {PSI_MAX}]")
    return p


def pose_feature_torch(theta: torch.Tensor) -> torch.Tensor:
    """vec(R(theta_k)) - vec(I) for non-root joints: (..., K, 3) -> (..., 9(K-1)).

    Exactly zero at rest pose for every joint.
    """
    rot = axis_angle_to_matrix(theta[..., 1:, :])
    eye = torch.eye(3, dtype=theta.dtype, device=theta.device)
    return (rot - eye).reshape(theta.shape[:-2] + (-1,))


def pose_feature(theta: np.ndarray) -> np.ndarray:
    return pose_feature_torch(torch.from_numpy(np.asarray(theta, dtype=np.float64))).numpy()


def pose_offset(blendshapes: BlendshapeSet, theta: np.ndarray) -> np.ndarray:
    """sum_n (vec(R)-vec(I))_n P_n over non-root joints, as (N, 3)."""
    feat = pose_feature(theta)
    if feat.shape[0] != blendshapes.count:
        raise BlendshapeError(
            f"pose set has {blendshapes.count} correctives, features give {feat.shape[0]}"
        )
    return (feat @ blendshapes.deltas).reshape(-1, 3)


# --- mapping networks ------------------------------------------------------


@dataclass
class MappingNetwork:
    """Fully connected ReLU network predicting PCA weights from beta."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    trained: bool = False
    loss_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise BlendshapeError("weights/biases layer mismatch")

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[0]

    def __call__(self, beta: np.ndarray) -> np.ndarray:
        x = np.asarray(beta, dtype=np.float64).ravel()
        if x.shape[0] != self.in_features:
            raise BlendshapeError(f"beta dim {x.shape[0]} != network input {self.in_features}")
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            x = np.maximum(w @ x + b, 0.0)
        return self.weights[-1] @ x + self.biases[-1]


def zero_mapping_network(in_features: int, out_features: int, hidden: int = 64) -> MappingNetwork:
    sizes = [(hidden, in_features), (hidden, hidden), (out_features, hidden)]
    return MappingNetwork(
        weights=[np.zeros(s) for s in sizes],
        biases=[np.zeros(s[0]) for s in sizes],
        trained=False,
    )


@dataclass
class MappingTrainConfig:
    learning_rate: float = 1e-4  # Adam
    weight_decay: float = 0.0  # decoupled; biases toward the min-norm interpolant
    max_epochs: int = 20000
    patience: int = 500  # epochs without improvement before stopping
    min_loss: float = 1e-12
    hidden: int = 64
    seed: int = 0


def train_mapping_network(
    sets: list[tuple[np.ndarray, BlendshapeSet | np.ndarray]],
    space: PcaSpace,
    config: MappingTrainConfig | None = None,
) -> MappingNetwork:
    """Fit beta -> PCA weights on (beta, blendshape set) pairs.

    Targets are the sets' projections into ``space``; loss is the mean squared
    error on the weight vectors. Raises DivergenceError if the loss goes
    non-finite.
    """
    cfg = config or MappingTrainConfig()
    if len(sets) < 1:
        raise BlendshapeError("need at least one training identity")
    betas = np.stack([np.asarray(b, dtype=np.float64).ravel() for b, _ in sets])
    flats = [
        (s.deltas.ravel() if isinstance(s, BlendshapeSet) else np.asarray(s, dtype=np.float64).ravel())
        for _, s in sets
    ]
    targets = np.stack([space.basis.T @ (f - space.mean) for f in flats])

    torch.manual_seed(cfg.seed)
    net = torch.nn.Sequential(
        torch.nn.Linear(betas.shape[1], cfg.hidden),
        torch.nn.ReLU(),
        torch.nn.Linear(cfg.hidden, cfg.hidden),
        torch.nn.ReLU(),
        torch.nn.Linear(cfg.hidden, targets.shape[1]),
    ).double()
    x = torch.from_numpy(betas)
    y = torch.from_numpy(targets)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history: list[float] = []
    best = np.inf
    best_state = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        opt.zero_grad()
        loss = torch.mean((net(x) - y) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise DivergenceError(
                f"mapping network diverged at epoch {epoch}: loss={value}, lr={cfg.learning_rate}"
            )
        history.append(value)
        if value < best - 1e-15:
            best = value
            best_state = [p.detach().clone() for p in net.parameters()]
            stale = 0
        else:
            stale += 1
        if value <= cfg.min_loss or stale >= cfg.patience:
            break
        loss.backward()
        opt.step()
    if best_state is not None:
        with torch.no_grad():
            for p, s in zip(net.parameters(), best_state):
                p.copy_(s)
    linears = [m for m in net if isinstance(m, torch.nn.Linear)]
    return MappingNetwork(
        weights=[m.weight.detach().numpy().copy() for m in linears],
        biases=[m.bias.detach().numpy().copy() for m in linears],
        trained=True,
        loss_history=history,
    )


def personalize_blendshapes(
    net: MappingNetwork, space: PcaSpace, beta: np.ndarray, count: int, kind: str
) -> BlendshapeSet:
    """Blendshape set mean + basis @ net(beta), reshaped to (count, 3N)."""
    if not net.trained:
        raise BlendshapeError("mapping network is untrained")
    flat = space.mean + space.basis @ net(beta)
    return BlendshapeSet(deltas=flat.reshape(count, -1), kind=kind)


def personalize_expressions(net: MappingNetwork, exp_space: PcaSpace, beta: np.ndarray, count: int) -> BlendshapeSet:
    return personalize_blendshapes(net, exp_space, beta, count, "expression")


def mapping_forward_torch(
    weights: list[torch.Tensor], biases: list[torch.Tensor], x: torch.Tensor
) -> torch.Tensor:
    """Differentiable evaluation of a MappingNetwork from raw layer tensors."""
    for w, b in zip(weights[:-1], biases[:-1]):
        x = torch.relu(w @ x + b)
    return weights[-1] @ x + biases[-1]


def windowed_means(history: list[float], window: int) -> np.ndarray:
    """Means over consecutive windows, for monotone-trend checks on loss curves."""
    h = np.asarray(history, dtype=np.float64)
    usable = (len(h) // window) * window
    if usable == 0:
        return h.reshape(1, -1).mean(axis=1)
    return h[:usable].reshape(-1, window).mean(axis=1)
