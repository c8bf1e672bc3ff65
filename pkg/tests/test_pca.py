import numpy as np
import pytest

from nape.pca import PcaError, PcaSpace, fit_pca, orthonormality_error, project, reconstruct


def test_rank_one_line(rng):
    direction = rng.normal(size=7)
    direction /= np.linalg.norm(direction)
    samples = rng.normal(size=(12, 1)) * direction[None, :]
    space = fit_pca(samples, keep=1)
    assert space.variance_ratio[0] == pytest.approx(1.0)
    assert abs(abs(direction @ space.basis[:, 0]) - 1.0) < 1e-12


def test_variance_ratio_full_rank(rng):
    samples = rng.normal(size=(9, 20))
    space = fit_pca(samples, keep=8)
    cum = np.cumsum(space.variance_ratio)
    assert np.all(np.diff(cum) >= -1e-15)
    assert cum[-1] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(space.variance_ratio) <= 1e-12)


def test_orthonormality(rng):
    space = fit_pca(rng.normal(size=(15, 40)), keep=10)
    assert orthonormality_error(space) < 1e-8


def test_project_mean_is_zero(rng):
    space = fit_pca(rng.normal(size=(10, 12)), keep=5)
    assert np.allclose(project(space, space.mean), 0.0, atol=1e-12)


def test_project_basis_column(rng):
    space = fit_pca(rng.normal(size=(10, 12)), keep=5)
    coeffs = project(space, space.mean + 2.0 * space.basis[:, 0])
    assert np.allclose(coeffs, [2, 0, 0, 0, 0], atol=1e-10)


def test_residual_orthogonal_to_column_space(rng):
    space = fit_pca(rng.normal(size=(10, 30)), keep=4)
    x = rng.normal(size=30)
    resid = x - reconstruct(space, project(space, x))
    assert np.abs(space.basis.T @ resid).max() < 1e-8


def test_training_sample_exact_at_full_rank(rng):
    samples = rng.normal(size=(8, 25))
    space = fit_pca(samples, keep=7)
    for s in samples:
        rec = reconstruct(space, project(space, s))
        assert np.linalg.norm(rec - s) < 1e-6 * max(np.linalg.norm(s), 1.0)


def test_insufficient_samples():
    with pytest.raises(PcaError):
        fit_pca(np.zeros((1, 5)), keep=1)
    with pytest.raises(PcaError):
        fit_pca(np.zeros((4, 5)), keep=4)  # keep > count - 1


def test_identical_samples_zero_variance():
    samples = np.tile(np.arange(6.0), (5, 1))
    space = fit_pca(samples, keep=2)
    assert np.all(space.variance_ratio == 0.0)


def test_deterministic_fit(rng):
    samples = rng.normal(size=(12, 18))
    a = fit_pca(samples, keep=6)
    b = fit_pca(samples.copy(), keep=6)
    assert np.array_equal(a.basis, b.basis)


def test_variance_ratio_ordering_enforced():
    with pytest.raises(PcaError):
        PcaSpace(mean=np.zeros(3), basis=np.eye(3)[:, :2], variance_ratio=np.array([0.1, 0.5]))
