"""Compactness and generalization reports for the learned PCA spaces.

Protocol: a seeded 90/10 train/test split; compactness is the cumulative
explained-variance curve of the training fit, generalization the mean and
standard deviation of per-sample reconstruction RMSE on the held-out split as
the component count grows. Each report writes a CSV table and a PNG figure
rendered with matplotlib.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .pca import fit_pca  # noqa: E402


class ReportError(ValueError):
    pass


@dataclass
class SpaceReport:
    name: str
    components: np.ndarray
    variance_ratio: np.ndarray
    cumulative: np.ndarray
    test_mean_rmse: np.ndarray
    test_std_rmse: np.ndarray
    compactness_csv: Path
    generalization_csv: Path
    figure_png: Path


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = max(2, int(round(train_fraction * n)))
    n_train = min(n_train, n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def pca_report(
    samples: np.ndarray,
    name: str,
    out_dir: str | Path,
    *,
    seed: int = 0,
    train_fraction: float = 0.9,
    max_components: int | None = None,
) -> SpaceReport:
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ReportError(f"{name}: need at least 3 samples, got shape {data.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, test_idx = split_indices(data.shape[0], train_fraction, seed)
    train, test = data[train_idx], data[test_idx]
    cap = min(train.shape[0] - 1, train.shape[1])
    n_comp = min(max_components, cap) if max_components else cap
    space = fit_pca(train, keep=n_comp)

    cumulative = np.cumsum(space.variance_ratio)
    centered = test - space.mean
    coeffs = centered @ space.basis  # (n_test, C)
    norms_sq = np.sum(centered**2, axis=1)
    comp_counts = np.arange(1, n_comp + 1)
    # residual norm after c components, via nested orthogonal projections
    cum_coeff_sq = np.cumsum(coeffs**2, axis=1)
    resid_sq = np.maximum(norms_sq[:, None] - cum_coeff_sq, 0.0)
    rmse = np.sqrt(resid_sq / test.shape[1])
    mean_rmse = rmse.mean(axis=0)
    std_rmse = rmse.std(axis=0)

    compact_csv = out / f"compactness_{name}.csv"
    with open(compact_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "variance_ratio", "cumulative"])
        for c in comp_counts:
            writer.writerow([c, repr(float(space.variance_ratio[c - 1])), repr(float(cumulative[c - 1]))])
    general_csv = out / f"generalization_{name}.csv"
    with open(general_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "mean_rmse", "std_rmse"])
        for c in comp_counts:
            writer.writerow([c, repr(float(mean_rmse[c - 1])), repr(float(std_rmse[c - 1]))])

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(comp_counts, 100.0 * cumulative, "r-", lw=1.5)
    axes[0].set_xlabel("components")
    axes[0].set_ylabel("explained variance [%]")
    axes[0].set_title(f"{name}: compactness")
    axes[0].grid(alpha=0.3)
    axes[1].errorbar(comp_counts, mean_rmse, yerr=std_rmse, fmt="b-", lw=1.2, ecolor="lightblue")
    axes[1].set_xlabel("components")
    axes[1].set_ylabel("test RMSE [mm]")
    axes[1].set_title(f"{name}: generalization")
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    figure_png = out / f"pca_report_{name}.png"
    fig.savefig(figure_png, dpi=110)
    plt.close(fig)

    return SpaceReport(
        name=name,
        components=comp_counts,
        variance_ratio=space.variance_ratio,
        cumulative=cumulative,
        test_mean_rmse=mean_rmse,
        test_std_rmse=std_rmse,
        compactness_csv=compact_csv,
        generalization_csv=general_csv,
        figure_png=figure_png,
    )
