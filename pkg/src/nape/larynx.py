"""Larynx shape space and the UV-space vertical-slide deformation.

The basis lives in UV space: a mean displacement map plus principal maps,
masked to the larynx region (training-data footprint dilated by 2 texels).
Sliding by tau moves the lookup row; size eta scales the whole displacement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import torch

from .mesh import Mesh
from .pca import fit_pca
from .uvmap import UvError, gather_rows_torch, scatter_to_uv, texel_indices

TAU_MAX_DEFAULT = 0.1
ETA_RANGE = (0.0, 2.0)


class LarynxError(ValueError):
    pass


@dataclass(frozen=True)
class LarynxParams:
    """eta: size multiplier in [0, 2]; tau: vertical slide in UV v-units."""

    eta: float = 1.0
    tau: float = 0.0
    tau_max: float = TAU_MAX_DEFAULT

    def __post_init__(self):
        if not (ETA_RANGE[0] <= self.eta <= ETA_RANGE[1]):
            raise LarynxError(f"eta={self.eta} outside {ETA_RANGE}")
        if abs(self.tau) > self.tau_max:
            raise LarynxError(f"|tau|={abs(self.tau)} exceeds tau_max={self.tau_max}")


@dataclass(frozen=True)
class LarynxBasis:
    """mean_map (H, W, 3), maps (C, H, W, 3), boolean mask (H, W); all maps are
    exactly zero outside the mask. region_vertices indexes the mesh vertices
    whose texels fall inside the mask."""

    mean_map: np.ndarray
    maps: np.ndarray
    mask: np.ndarray
    region_vertices: np.ndarray
    variance_ratio: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean_map, dtype=np.float64)
        maps = np.ascontiguousarray(self.maps, dtype=np.float64)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        region = np.ascontiguousarray(self.region_vertices, dtype=np.int64)
        ratio = np.ascontiguousarray(self.variance_ratio, dtype=np.float64)
        for name, val in (("mean_map", mean), ("maps", maps), ("mask", mask),
                          ("region_vertices", region), ("variance_ratio", ratio)):
            object.__setattr__(self, name, val)
        if mean.ndim != 3 or mean.shape[2] != 3:
            raise LarynxError(f"mean_map must be (H, W, 3), got {mean.shape}")
        if maps.ndim != 4 or maps.shape[1:] != mean.shape:
            raise LarynxError(f"maps must be (C, H, W, 3) matching mean, got {maps.shape}")
        if mask.shape != mean.shape[:2]:
            raise LarynxError("mask must be (H, W)")
        outside = ~mask
        if np.any(mean[outside] != 0.0) or np.any(maps[:, outside] != 0.0):
            raise LarynxError("basis maps must be exactly zero outside the mask")

    @property
    def n_components(self) -> int:
        return self.maps.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mean_map.shape[0], self.mean_map.shape[1]


def fit_larynx_basis(
    larynx_displacements: list[tuple[np.ndarray, np.ndarray]],
    mesh: Mesh,
    resolution: tuple[int, int],
    *,
    keep: int | None = None,
    dilate: int = 2,
) -> LarynxBasis:
    """PCA over per-identity larynx displacement maps at rest slide (tau = 0).

    Each sample is (beta, per-vertex displacement); displacements scatter into
    UV, the mask is the union footprint dilated by ``dilate`` texels, and maps
    are re-zeroed outside it after the decomposition.
    """
    if not larynx_displacements:
        raise LarynxError("no larynx displacement samples")
    n_beta = np.asarray(larynx_displacements[0][0]).size
    keep = keep if keep is not None else n_beta
    keep = min(keep, max(1, len(larynx_displacements) - 1))
    grids = []
    for _, disp in larynx_displacements:
        grids.append(scatter_to_uv(mesh, disp, resolution).data)
    stack = np.stack(grids)
    support = np.any(stack != 0.0, axis=(0, 3))
    mask = ndi.binary_dilation(support, iterations=dilate) if dilate > 0 else support
    space = fit_pca(stack.reshape(len(grids), -1), keep=keep)
    if space.variance_ratio[0] == 0.0:
        warnings.warn("larynx training data has zero variance; basis is rank deficient")
    mean_map = space.mean.reshape(resolution[0], resolution[1], 3)
    maps = space.basis.T.reshape(keep, resolution[0], resolution[1], 3)
    # mean/components are combinations of the data, so they vanish outside the
    # data footprint in exact arithmetic; re-zero to scrub SVD float dust.
    mean_map[~support] = 0.0
    maps[:, ~support] = 0.0
    rows, cols = texel_indices(mesh.uv, resolution)
    region = np.nonzero(mask[rows, cols])[0]
    return LarynxBasis(
        mean_map=mean_map,
        maps=maps,
        mask=mask,
        region_vertices=region,
        variance_ratio=space.variance_ratio,
    )


def _region_texels(basis: LarynxBasis, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = texel_indices(mesh.uv, basis.resolution)
    return rows[basis.region_vertices], cols[basis.region_vertices]


def larynx_offset_torch(
    mean_map: torch.Tensor,
    maps: torch.Tensor,
    rows: torch.Tensor,
    cols: torch.Tensor,
    region: torch.Tensor,
    n_vertices: int,
    beta: torch.Tensor,
    eta: torch.Tensor,
    tau: torch.Tensor,
    *,
    include_mean: bool,
) -> torch.Tensor:
    """Batched larynx displacement, (B, N, 3); eta/tau are (B,), beta (C,)."""
    h = mean_map.shape[0]
    stackd = torch.cat([mean_map[None], maps], dim=0) if include_mean else maps
    sampled = gather_rows_torch(stackd, rows, cols, tau * h)  # (B, M, V, 3)
    if include_mean:
        combo = sampled[:, 0] + torch.einsum("c,bcvd->bvd", beta, sampled[:, 1:])
    else:
        combo = torch.einsum("c,bcvd->bvd", beta, sampled)
    combo = eta[:, None, None] * combo
    out = torch.zeros(
        (tau.shape[0], n_vertices, 3), dtype=mean_map.dtype, device=mean_map.device
    )
    return out.index_copy(1, region, combo)


def _eval(basis: LarynxBasis, mesh: Mesh, params: LarynxParams, beta: np.ndarray, include_mean: bool) -> np.ndarray:
    b = np.asarray(beta, dtype=np.float64).ravel()
    if b.shape[0] > basis.n_components:
        raise LarynxError(f"|beta|={b.shape[0]} exceeds basis count {basis.n_components}")
    if b.shape[0] < basis.n_components:
        b = np.concatenate([b, np.zeros(basis.n_components - b.shape[0])])
    rows, cols = _region_texels(basis, mesh)
    out = larynx_offset_torch(
        torch.from_numpy(basis.mean_map),
        torch.from_numpy(basis.maps),
        torch.from_numpy(rows),
        torch.from_numpy(cols),
        torch.from_numpy(basis.region_vertices),
        mesh.n_vertices,
        torch.from_numpy(b),
        torch.tensor([float(params.eta)], dtype=torch.float64),
        torch.tensor([float(params.tau)], dtype=torch.float64),
        include_mean=include_mean,
    )
    return out[0].numpy()


def larynx_offset(basis: LarynxBasis, mesh: Mesh, params: LarynxParams, beta: np.ndarray) -> np.ndarray:
    """eta * sum_i beta_i L_i(u, v + tau): strictly linear in beta, (N, 3).

    Vertices outside the larynx region receive exactly zero.
    """
    return _eval(basis, mesh, params, beta, include_mean=False)


def larynx_displacement(basis: LarynxBasis, mesh: Mesh, params: LarynxParams, beta: np.ndarray) -> np.ndarray:
    """Full model term eta * (mean(tau) + sum_i beta_i L_i(tau)), (N, 3).

    At tau = 0 and eta = 1 this is the static PCA reconstruction with
    coefficients beta.
    """
    return _eval(basis, mesh, params, beta, include_mean=True)


def tau_to_mm(basis: LarynxBasis, neck_height_mm: float) -> float:
    """Millimeters of physical slide per unit tau, given the UV-to-mm scale of
    the atlas's v axis (identity- and layout-dependent)."""
    return float(neck_height_mm)


def swallow_curve(clips: list[np.ndarray], *, length: int | None = None) -> np.ndarray:
    """Canonical swallow: resample clips, align dominant peaks, average.

    Each clip must contain one dominant peak (max deviation from its own
    baseline); peakless clips raise LarynxError.
    """
    if not clips:
        raise LarynxError("no clips")
    series = [np.asarray(c, dtype=np.float64).ravel() for c in clips]
    target_len = length or int(np.median([len(s) for s in series]))
    resampled = []
    peaks = []
    for s in series:
        if len(s) < 3:
            raise LarynxError("clip too short")
        grid = np.linspace(0.0, 1.0, target_len)
        src = np.linspace(0.0, 1.0, len(s))
        r = np.interp(grid, src, s)
        baseline = np.median(r)
        dev = np.abs(r - baseline)
        if dev.max() <= 1e-12 or dev.max() < 3.0 * (np.mean(dev) + 1e-30):
            raise LarynxError("no detectable peak in clip")
        resampled.append(r)
        peaks.append(int(np.argmax(dev)))
    anchor = peaks[0]  # first clip sets the temporal reference
    aligned = []
    for r, p in zip(resampled, peaks):
        shift = anchor - p
        rolled = np.empty_like(r)
        if shift >= 0:
            rolled[shift:] = r[: target_len - shift]
            rolled[:shift] = r[0]
        else:
            rolled[:shift] = r[-shift:]
            rolled[shift:] = r[-1]
        aligned.append(rolled)
    return np.mean(aligned, axis=0)


def check_collision_free(mesh: Mesh, resolution: tuple[int, int]) -> None:
    """Raise UvError if two vertices share a texel at this resolution."""
    scatter_to_uv(mesh, np.zeros((mesh.n_vertices, 3)), resolution)
