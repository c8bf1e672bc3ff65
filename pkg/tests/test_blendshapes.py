import numpy as np
import pytest

from nape.blendshapes import (
    BlendshapeError,
    BlendshapeSet,
    DivergenceError,
    MappingTrainConfig,
    expression_offset,
    personalize_expressions,
    pose_feature,
    pose_offset,
    synthesize_shape,
    train_mapping_network,
    windowed_means,
    zero_mapping_network,
)
from nape.pca import fit_pca
from nape.rotations import axis_angle_to_matrix_np


def test_synthesize_shape_zero_and_columns(tiny_truth):
    space = tiny_truth.model.shape_space
    n = tiny_truth.model.n_vertices
    assert not synthesize_shape(space, np.zeros(5)).any()
    e1 = np.zeros(5)
    e1[1] = 1.0
    assert np.array_equal(synthesize_shape(space, e1).reshape(-1), space.basis[:, 1])
    assert synthesize_shape(space, e1).shape == (n, 3)


def test_synthesize_shape_naive_loop(tiny_truth, rng):
    space = tiny_truth.model.shape_space
    beta = rng.normal(size=5)
    slow = sum(beta[i] * space.basis[:, i] for i in range(5))
    assert np.allclose(synthesize_shape(space, beta).reshape(-1), slow, atol=1e-12)


def test_expression_offset_contract(tiny_truth, rng):
    sets = tiny_truth.expression_sets
    bs = sets[sorted(sets)[0]]
    assert not expression_offset(bs, np.zeros(bs.count)).any()
    e2 = np.zeros(bs.count)
    e2[2] = 1.0
    assert np.array_equal(expression_offset(bs, e2).reshape(-1), bs.deltas[2])
    psi = rng.uniform(0, 1, size=bs.count)
    slow = sum(psi[j] * bs.deltas[j] for j in range(bs.count))
    assert np.allclose(expression_offset(bs, psi).reshape(-1), slow, atol=1e-12)


def test_offsets_superposition(tiny_truth, rng):
    sets = tiny_truth.expression_sets
    bs = sets[sorted(sets)[0]]
    p1, p2 = rng.uniform(0, 0.7, size=(2, bs.count))
    lhs = expression_offset(bs, p1 + p2)
    rhs = expression_offset(bs, p1) + expression_offset(bs, p2)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_pose_offset_rest_is_exactly_zero(tiny_truth):
    pose_set = tiny_truth.model.pose_set(tiny_truth.betas[0])
    out = pose_offset(pose_set, np.zeros((8, 3)))
    assert not out.any()


def test_pose_feature_single_joint_element(rng):
    theta = np.zeros((8, 3))
    theta[3] = [0.0, 0.0, 0.4]
    feat = pose_feature(theta)
    rot = axis_angle_to_matrix_np(theta[3])
    block = feat[9 * 2 : 9 * 3].reshape(3, 3)  # joint 3 is the 3rd non-root joint
    assert np.allclose(block, rot - np.eye(3), atol=1e-12)
    # single matched blendshape picks out that rotation element
    n = 10
    deltas = np.zeros((63, 3 * n))
    deltas[9 * 2 + 1] = 1.0  # element R01 of joint 3
    bs = BlendshapeSet(deltas=deltas, kind="pose")
    out = pose_offset(bs, theta)
    assert np.allclose(out.reshape(-1), rot[0, 1] * np.ones(3 * n), atol=1e-12)


def test_pose_offset_naive_loop(tiny_truth, rng):
    pose_set = tiny_truth.model.pose_set(tiny_truth.betas[1])
    theta = rng.normal(scale=0.2, size=(8, 3))
    feat = pose_feature(theta)
    slow = sum(feat[i] * pose_set.deltas[i] for i in range(63))
    assert np.allclose(pose_offset(pose_set, theta).reshape(-1), slow, atol=1e-10)


def test_zero_network_gives_mean(tiny_truth):
    model = tiny_truth.model
    net = zero_mapping_network(5, model.exp_space.n_components)
    net.trained = True
    out = personalize_expressions(net, model.exp_space, np.zeros(5), model.n_expressions)
    assert np.array_equal(out.deltas.reshape(-1), model.exp_space.mean)


def test_untrained_network_flagged(tiny_truth):
    model = tiny_truth.model
    net = zero_mapping_network(5, model.exp_space.n_components)
    with pytest.raises(BlendshapeError, match="untrained"):
        personalize_expressions(net, model.exp_space, np.zeros(5), model.n_expressions)


def test_personalized_set_lies_in_affine_span(tiny_truth, rng):
    model = tiny_truth.model
    beta = rng.normal(scale=30, size=5)
    out = model.expression_set(beta)
    flat = out.deltas.reshape(-1) - model.exp_space.mean
    resid = flat - model.exp_space.basis @ (model.exp_space.basis.T @ flat)
    assert np.linalg.norm(resid) < 1e-6 * max(np.linalg.norm(flat), 1.0)


def test_train_single_pair_overfits(rng):
    d = 40
    space = fit_pca(rng.normal(size=(6, d)), keep=3)
    beta = rng.normal(size=4)
    target = space.mean + space.basis @ rng.normal(size=3)
    cfg = MappingTrainConfig(max_epochs=20000, patience=2000, min_loss=1e-10, seed=0)
    net = train_mapping_network([(beta, target)], space, cfg)
    pred = space.mean + space.basis @ net(beta)
    residual = np.linalg.norm(pred - target) / np.linalg.norm(target)
    assert residual < 1e-4


def test_train_planted_linear_map_generalizes(rng):
    # 50 training identities on a planted linear map; held-out aggregate
    # weight error must stay under 5% of the weight RMS (weight decay pulls
    # the interpolant toward the minimum-norm, near-linear solution)
    d, pcs, nb = 60, 4, 3
    space = fit_pca(rng.normal(size=(10, d)), keep=pcs)
    a = rng.normal(size=(pcs, nb))
    betas = rng.normal(size=(90, nb))
    sets = [space.mean + space.basis @ (a @ b) for b in betas]
    train = [(betas[i], sets[i]) for i in range(50)]
    cfg = MappingTrainConfig(max_epochs=30000, patience=3000, seed=1, weight_decay=2.0)
    net = train_mapping_network(train, space, cfg)
    errs, refs = [], []
    for i in range(50, 90):
        pred = net(betas[i])
        truth = a @ betas[i]
        errs.append(np.sum((pred - truth) ** 2))
        refs.append(np.sum(truth**2))
    rel = np.sqrt(np.sum(errs) / np.sum(refs))
    assert rel < 0.05


def test_default_learning_rate_is_paper_value():
    assert MappingTrainConfig().learning_rate == 0.0001


def test_loss_history_trend(tiny_truth):
    history = tiny_truth.model.exp_net.loss_history or [1.0, 0.5]
    means = windowed_means(history, max(1, len(history) // 5))
    assert means[-1] <= means[0]


def test_divergence_raises(rng):
    space = fit_pca(rng.normal(size=(6, 10)), keep=2)
    pairs = [(rng.normal(size=3) * 1e150, space.mean + space.basis @ rng.normal(size=2) * 1e150)]
    cfg = MappingTrainConfig(learning_rate=1e30, max_epochs=50, seed=0)
    with pytest.raises((DivergenceError, OverflowError)):
        train_mapping_network(pairs, space, cfg)
