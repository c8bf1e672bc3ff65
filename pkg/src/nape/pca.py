"""PCA spaces: mean + orthonormal basis + explained-variance ratios.

One machinery reused for shape, larynx, expression, pose and appearance
spaces. Component signs are canonicalized (largest-magnitude entry positive)
so fits are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PcaError(ValueError):
    pass


@dataclass(frozen=True)
class PcaSpace:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, C), column-orthonormal
    variance_ratio: np.ndarray  # (C,), non-increasing, sums to <= 1

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        ratio = np.ascontiguousarray(self.variance_ratio, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "variance_ratio", ratio)
        if basis.ndim != 2 or basis.shape[0] != mean.shape[0]:
            raise PcaError(f"basis {basis.shape} does not match mean {mean.shape}")
        if ratio.shape != (basis.shape[1],):
            raise PcaError("variance_ratio length must equal component count")
        if np.any(np.diff(ratio) > 1e-12):
            raise PcaError("variance_ratio must be non-increasing")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def _canonical_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def fit_pca(samples: np.ndarray | list[np.ndarray], keep: int) -> PcaSpace:
    """Top-``keep`` principal directions of the centered samples.

    Requires at least two samples and keep <= min(D, count - 1). Any training
    sample reconstructs exactly (to float precision) when keep reaches the
    data rank.
    """
    data = np.stack([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    n, d = data.shape
    if n < 2:
        raise PcaError(f"need at least 2 samples, got {n}")
    if keep < 1 or keep > min(d, n - 1):
        raise PcaError(f"keep={keep} outside [1, min(D, count-1)] = [1, {min(d, n - 1)}]")
    mean = data.mean(axis=0)
    centered = data - mean
    # SVD of the n x d centered matrix; right singular vectors are the basis.
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(svals**2))
    if total <= 0.0:
        # all samples identical: arbitrary orthonormal directions, zero variance
        basis = np.zeros((d, keep))
        basis[np.arange(keep), np.arange(keep)] = 1.0
        return PcaSpace(mean=mean, basis=basis, variance_ratio=np.zeros(keep))
    basis = vt[:keep].T
    basis = basis * _canonical_signs(basis)[None, :]
    ratio = (svals[:keep] ** 2) / total
    return PcaSpace(mean=mean, basis=basis, variance_ratio=ratio)


def project(space: PcaSpace, sample: np.ndarray) -> np.ndarray:
    """Coefficients basis^T (sample - mean); least-squares optimal by orthonormality."""
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.shape[0] != space.dim:
        raise PcaError(f"sample has dim {x.shape[0]}, space expects {space.dim}")
    return space.basis.T @ (x - space.mean)


def reconstruct(space: PcaSpace, coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64).ravel()
    if c.shape[0] > space.n_components:
        raise PcaError(f"{c.shape[0]} coefficients for {space.n_components} components")
    return space.mean + space.basis[:, : c.shape[0]] @ c


def orthonormality_error(space: PcaSpace) -> float:
    gram = space.basis.T @ space.basis
    return float(np.abs(gram - np.eye(space.n_components)).max())
