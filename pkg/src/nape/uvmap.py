"""UV atlasing of per-vertex displacement fields.

Convention: vertex (u, v) addresses the texel (row, col) = (floor(v*H),
floor(u*W)) and both scatter and gather use that texel's center as the sample
point, so a zero-shift scatter/gather round trip is a lossless identity.
Gather applies a vertical shift in UV v-units and interpolates linearly
between the two straddled texel rows, reading zero beyond the image border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .mesh import Mesh


class UvError(ValueError):
    pass


@dataclass(frozen=True)
class DisplacementMap:
    """H x W x 3 grid of millimeter displacements; untouched texels are zero."""

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise UvError(f"map must be (H, W, 3), got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


def texel_indices(uv: np.ndarray, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Integer (row, col) per vertex; uv must lie in [0, 1)."""
    h, w = resolution
    rows = np.floor(uv[:, 1] * h).astype(np.int64)
    cols = np.floor(uv[:, 0] * w).astype(np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise UvError("uv coordinates outside [0, 1)")
    return rows, cols


def scatter_to_uv(mesh: Mesh, displacements: np.ndarray, resolution: tuple[int, int]) -> DisplacementMap:
    """Write one displacement per vertex into its texel; collisions are errors."""
    disp = np.asarray(displacements, dtype=np.float64)
    if disp.shape != (mesh.n_vertices, 3):
        raise UvError(f"displacements must be ({mesh.n_vertices}, 3), got {disp.shape}")
    h, w = resolution
    rows, cols = texel_indices(mesh.uv, resolution)
    flat = rows * w + cols
    order = np.argsort(flat, kind="stable")
    dup = np.nonzero(np.diff(flat[order]) == 0)[0]
    if dup.size:
        i, j = order[dup[0]], order[dup[0] + 1]
        raise UvError(
            f"texel collision at (row={rows[i]}, col={cols[i]}): vertices {i} and {j} "
            f"both map there at resolution {h}x{w}"
        )
    grid = np.zeros((h, w, 3), dtype=np.float64)
    grid[rows, cols] = disp
    return DisplacementMap(data=grid)


def gather_rows_torch(
    maps: torch.Tensor,
    rows: torch.Tensor,
    cols: torch.Tensor,
    row_shift: torch.Tensor,
) -> torch.Tensor:
    """Sample maps at (rows + row_shift, cols), linearly blending texel rows.

    maps: (M, H, W, 3); rows, cols: (V,) integer vertex texels; row_shift:
    scalar or (B,) shifts in texel units (differentiable). Rows outside the
    image read zero. Returns (M, V, 3) for a scalar shift, else (B, M, V, 3).
    """
    h = maps.shape[1]
    scalar = row_shift.dim() == 0
    shift = row_shift.reshape(-1)
    pos = rows.to(maps.dtype)[None, :] + shift[:, None]  # (B, V)
    r0 = torch.floor(pos)
    frac = pos - r0
    r1 = r0 + 1.0
    valid0 = (r0 >= 0) & (r0 <= h - 1)
    valid1 = (r1 >= 0) & (r1 <= h - 1)
    i0 = r0.clamp(0, h - 1).long()
    i1 = r1.clamp(0, h - 1).long()
    maps_cols = maps[:, :, cols]  # (M, H, V, 3)
    vidx = torch.arange(cols.shape[0], device=maps.device)
    v0 = maps_cols[:, i0, vidx]  # (M, B, V, 3)
    v1 = maps_cols[:, i1, vidx]
    w0 = ((1.0 - frac) * valid0.to(maps.dtype))[None, :, :, None]
    w1 = (frac * valid1.to(maps.dtype))[None, :, :, None]
    out = (v0 * w0 + v1 * w1).movedim(1, 0)  # (B, M, V, 3)
    return out[0] if scalar else out


def gather_from_uv(mesh: Mesh, dmap: DisplacementMap, v_shift: float = 0.0) -> np.ndarray:
    """Sample the map at each vertex's texel center shifted by v_shift (UV units)."""
    h, w = dmap.resolution
    rows, cols = texel_indices(mesh.uv, (h, w))
    out = gather_rows_torch(
        torch.from_numpy(dmap.data[None]),
        torch.from_numpy(rows),
        torch.from_numpy(cols),
        torch.tensor(float(v_shift) * h, dtype=torch.float64),
    )
    return out[0].numpy()
