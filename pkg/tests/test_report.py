import csv

import numpy as np
import pytest

from nape.report import ReportError, pca_report, split_indices


def test_split_is_seeded_and_sized():
    a1, b1 = split_indices(40, 0.9, seed=3)
    a2, b2 = split_indices(40, 0.9, seed=3)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert len(a1) == 36 and len(b1) == 4
    assert not set(a1) & set(b1)


def test_report_outputs_and_monotonicity(tmp_path, rng):
    basis = np.linalg.qr(rng.normal(size=(30, 6)))[0]
    coeffs = rng.normal(size=(25, 6)) * np.array([8, 5, 3, 2, 1, 0.5])
    samples = coeffs @ basis.T + 0.01 * rng.normal(size=(25, 30))
    report = pca_report(samples, "shape", tmp_path, seed=0)
    assert np.all(np.diff(report.cumulative) >= -1e-15)
    # nested projections make per-sample residuals monotone, hence the mean too
    assert np.all(np.diff(report.test_mean_rmse) <= 1e-12)
    assert report.figure_png.exists() and report.figure_png.stat().st_size > 0
    with open(report.compactness_csv) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["component", "variance_ratio", "cumulative"]
    cumulative = [float(r[2]) for r in rows[1:]]
    assert cumulative == sorted(cumulative)
    with open(report.generalization_csv) as fh:
        grows = list(csv.reader(fh))
    assert grows[0] == ["component", "mean_rmse", "std_rmse"]


def test_report_exact_rank_hits_zero_error(tmp_path, rng):
    basis = np.linalg.qr(rng.normal(size=(40, 4)))[0]
    coeffs = rng.normal(size=(30, 4)) * np.array([5, 3, 2, 1])
    samples = coeffs @ basis.T
    report = pca_report(samples, "larynx", tmp_path, seed=1)
    assert report.test_mean_rmse[3] < 1e-6


def test_report_needs_samples(tmp_path):
    with pytest.raises(ReportError):
        pca_report(np.zeros((2, 5)), "x", tmp_path)
