import numpy as np
import pytest

from nape.mesh import Mesh
from nape.rotations import axis_angle_to_matrix_np, axis_angle_to_euler, euler_to_axis_angle
from nape.skeleton import (
    JOINT_NAMES,
    LandmarkPair,
    RotationLimits,
    Skeleton,
    SkeletonError,
    adjacent_similarity_energy,
    align_vertebra_template,
    collision_energy,
    default_limits,
    fit_joint_regressor,
    forward_kinematics,
    linear_blend_skin,
    load_limits,
    posed_joints,
    regress_joints,
    rotation_limit_energy,
    save_limits,
    validate_weights,
)


def _chain(k=8, spacing=20.0):
    pos = np.zeros((k, 3))
    pos[:, 2] = spacing * np.arange(k)
    return Skeleton(rest_positions=pos)


def test_skeleton_validation():
    with pytest.raises(SkeletonError):
        Skeleton(rest_positions=np.zeros((5, 3)))
    with pytest.raises(SkeletonError):
        Skeleton(rest_positions=np.zeros((8, 3)), parents=(0,) * 8)
    assert _chain().n_joints == 8


def test_fk_rest_pose_identity():
    skel = _chain()
    rots, trans = forward_kinematics(skel, np.zeros((8, 3)))
    assert np.array_equal(rots, np.stack([np.eye(3)] * 8))
    assert np.array_equal(trans, np.zeros((8, 3)))


def test_fk_root_rotation_closed_form(rng):
    skel = _chain()
    theta = np.zeros((8, 3))
    theta[0] = rng.normal(scale=0.4, size=3)
    rot = axis_angle_to_matrix_np(theta[0])
    joints = posed_joints(skel, theta)
    root = skel.rest_positions[0]
    expected = (skel.rest_positions - root) @ rot.T + root
    assert np.abs(joints - expected).max() < 1e-9
    rots, _ = forward_kinematics(skel, theta)
    for k in range(8):
        assert np.allclose(rots[k], rot, atol=1e-12)


def test_fk_two_joint_composition():
    skel = _chain(k=8)
    theta = np.zeros((8, 3))
    theta[0, 0] = np.pi / 2
    theta[1, 0] = np.pi / 2
    rots, _ = forward_kinematics(skel, theta)
    assert np.allclose(rots[1], axis_angle_to_matrix_np(np.array([np.pi, 0, 0])), atol=1e-12)


def test_lbs_identity_exact(tiny_truth):
    model = tiny_truth.model
    out = linear_blend_skin(
        model.template.vertices, model.skeleton, np.zeros((8, 3)), model.skin_weights
    )
    assert np.array_equal(out, model.template.vertices)


def test_lbs_one_hot_rigid_oracle(tiny_truth, rng):
    model = tiny_truth.model
    n = model.n_vertices
    for _ in range(20):
        j = int(rng.integers(8))
        weights = np.zeros((n, 8))
        weights[:, j] = 1.0
        theta = rng.normal(scale=0.25, size=(8, 3))
        out = linear_blend_skin(model.template.vertices, model.skeleton, theta, weights)
        rots, trans = forward_kinematics(model.skeleton, theta)
        expected = model.template.vertices @ rots[j].T + trans[j]
        assert np.abs(out - expected).max() < 1e-9


def test_lbs_half_weights_translation():
    # root rotation moves everything rigidly; for a pure-translation transform
    # use a two-joint chain where joint 1 is rotated about a far-away center
    skel = _chain(k=8)
    verts = np.array([[5.0, 5.0, 30.0]])
    weights = np.zeros((1, 8))
    weights[0, 0] = 0.5
    weights[0, 1] = 0.5
    theta = np.zeros((8, 3))
    out = linear_blend_skin(verts, skel, theta, weights)
    assert np.array_equal(out, verts)


def test_lbs_weight_validation():
    with pytest.raises(SkeletonError, match="sum"):
        validate_weights(np.full((2, 8), 0.2), 2, 8)
    bad = np.zeros((2, 8))
    bad[:, :5] = 0.2
    with pytest.raises(SkeletonError, match="at most"):
        validate_weights(bad, 2, 8)


def test_rotation_limits_table_round_trip(tmp_path):
    limits = default_limits()
    path = tmp_path / "limits.txt"
    save_limits(limits, path)
    again = load_limits(path)
    assert np.array_equal(again.bounds_deg, limits.bounds_deg)
    assert np.array_equal(again.bounds, limits.bounds)
    save_limits(again, tmp_path / "limits2.txt")
    assert (tmp_path / "limits2.txt").read_bytes() == path.read_bytes()
    first = path.read_text().splitlines()[0].split()
    assert first[0] == "c7-t1" and first[1] == "flexion"


def test_rotation_limits_validation():
    bad = np.zeros((8, 3, 2))
    bad[0, 0] = (0.1, 0.5)  # min must be <= 0
    with pytest.raises(SkeletonError):
        RotationLimits(bounds_deg=bad)


def test_limit_energy_zero_inside(rng):
    limits = default_limits()
    for _ in range(20):
        euler = rng.uniform(0.2, 0.8, size=(8, 3)) * limits.bounds[:, :, 1]
        theta = euler_to_axis_angle(euler)
        assert rotation_limit_energy(theta, limits) == 0.0
    assert rotation_limit_energy(np.zeros((8, 3)), limits) == 0.0


def test_limit_energy_single_axis_excess():
    limits = default_limits()
    bound = limits.bounds[0, 0, 1]
    theta = np.zeros((8, 3))
    theta[0, 0] = bound + 0.2
    assert rotation_limit_energy(theta, limits) == pytest.approx(0.2, abs=1e-9)


def test_limit_energy_naive_loop_oracle(rng):
    limits = default_limits()
    for _ in range(200):
        theta = rng.normal(scale=0.25, size=(8, 3))
        euler = np.stack([axis_angle_to_euler(theta[j], strict=False) for j in range(8)])
        slow = np.sum(np.maximum(euler - limits.bounds[:, :, 1], 0.0)) + np.sum(
            np.maximum(limits.bounds[:, :, 0] - euler, 0.0)
        )
        assert rotation_limit_energy(theta, limits) == pytest.approx(slow, abs=1e-12)


def test_similarity_energy_closed_form(rng):
    r = rng.normal(size=3)
    theta = np.zeros((8, 3))
    theta[1::2] = r
    assert adjacent_similarity_energy(theta) == pytest.approx(7 * np.dot(r, r), rel=1e-12)
    same = np.tile(rng.normal(size=3), (8, 1))
    assert adjacent_similarity_energy(same) == 0.0


def test_similarity_energy_naive_loop(rng):
    for _ in range(200):
        theta = rng.normal(scale=0.4, size=(8, 3))
        slow = sum(float(np.sum((theta[i] - theta[i + 1]) ** 2)) for i in range(7))
        assert adjacent_similarity_energy(theta) == pytest.approx(slow, rel=1e-12)


def _cylinder_skin(radius=40.0, height=200.0, rows=24, cols=16):
    r_idx, c_idx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    phi = 2 * np.pi * c_idx / cols
    verts = np.stack(
        [radius * np.cos(phi), radius * np.sin(phi), height * r_idx / (rows - 1) - 20.0], axis=-1
    ).reshape(-1, 3)
    uv = np.stack([(c_idx + 0.5) / cols, (r_idx + 0.5) / rows], axis=-1).reshape(-1, 2)
    faces = []
    for r in range(rows - 1):
        for c in range(cols):
            c2 = (c + 1) % cols
            faces.append((r * cols + c, r * cols + c2, (r + 1) * cols + c2))
            faces.append((r * cols + c, (r + 1) * cols + c2, (r + 1) * cols + c))
    return Mesh(vertices=verts, faces=np.array(faces), uv=uv)


def test_collision_zero_inside():
    skel = _chain()
    mesh = _cylinder_skin(radius=40.0)
    assert collision_energy(mesh.vertices, mesh.faces, skel, np.zeros((8, 3))) == 0.0


def test_collision_monotone_in_protrusion():
    skel = _chain()
    values = []
    for radius in (30.0, 7.0, 5.0, 3.0):
        mesh = _cylinder_skin(radius=radius)
        values.append(collision_energy(mesh.vertices, mesh.faces, skel, np.zeros((8, 3)), radius=8.0))
    assert values[0] == 0.0
    assert 0.0 < values[1] < values[2] < values[3]


def test_collision_gradient_finite_difference(rng):
    import torch

    from nape.mesh import vertex_normals_torch
    from nape.skeleton import capsule_sample_points, collision_energy_torch, fk_torch

    skel = _chain()
    mesh = _cylinder_skin(radius=9.0)  # in contact at radius 8
    rest = torch.from_numpy(skel.rest_positions)
    pts = capsule_sample_points(rest, 4)
    bone = torch.arange(7).repeat_interleave(4) + 1
    theta = torch.from_numpy(rng.normal(scale=0.05, size=(8, 3)))

    def energy(v):
        normals = vertex_normals_torch(v, torch.from_numpy(mesh.faces))
        world_r, world_t = fk_torch(rest, theta)
        return collision_energy_torch(v, normals, world_r, world_t, pts, bone, 8.0)

    verts = torch.from_numpy(mesh.vertices.copy()).requires_grad_(True)
    total = energy(verts)
    assert float(total) > 0.0
    total.backward()
    grad = verts.grad.numpy()
    h = 1e-4
    worst = 0.0
    checked = 0
    flat_idx = rng.choice(mesh.n_vertices * 3, size=30, replace=False)
    base = mesh.vertices.copy()
    for i in flat_idx:
        pert = base.copy().reshape(-1)
        pert[i] += h
        up = float(energy(torch.from_numpy(pert.reshape(-1, 3))))
        pert[i] -= 2 * h
        down = float(energy(torch.from_numpy(pert.reshape(-1, 3))))
        fd = (up - down) / (2 * h)
        g = grad.reshape(-1)[i]
        if max(abs(fd), abs(g)) < 1e-8:
            continue
        checked += 1
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g)))
    assert checked > 0
    assert worst < 1e-4


def test_regressor_bias_and_linearity(rng):
    matrix = rng.normal(size=(24, 6))
    bias = rng.normal(size=24)
    from nape.skeleton import JointRegressor

    reg = JointRegressor(matrix=matrix, bias=bias)
    assert np.allclose(regress_joints(reg, np.zeros(6)).reshape(-1), bias)
    b1, b2 = rng.normal(size=6), rng.normal(size=6)
    a, b = 0.7, -1.3
    lhs = regress_joints(reg, a * b1 + b * b2).reshape(-1)
    rhs = (
        a * regress_joints(reg, b1).reshape(-1)
        + b * regress_joints(reg, b2).reshape(-1)
        + (1 - a - b) * bias
    )
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_fit_regressor_planted_noiseless(rng):
    matrix = rng.normal(size=(24, 10))
    bias = rng.normal(size=24)
    pairs = [
        (b, (bias + matrix @ b).reshape(8, 3)) for b in rng.normal(size=(30, 10))
    ]
    reg, residual = fit_joint_regressor(pairs)
    assert residual < 1e-8
    assert np.abs(reg.matrix - matrix).max() < 1e-8


def test_fit_regressor_single_pair_degenerate(rng):
    joints = rng.normal(size=(8, 3))
    reg, residual = fit_joint_regressor([(rng.normal(size=10), joints)])
    assert residual < 1e-6
    assert np.allclose(regress_joints(reg, np.zeros(10)), joints, atol=1e-4)


def test_fit_regressor_noisy_residual(rng):
    matrix = rng.normal(size=(24, 10))
    bias = rng.normal(size=24)
    pairs = []
    for b in rng.normal(size=(30, 10)):
        joints = (bias + matrix @ b).reshape(8, 3) + rng.normal(scale=0.1, size=(8, 3))
        pairs.append((b, joints))
    _, residual = fit_joint_regressor(pairs)
    assert residual <= 0.2


def test_vertebra_alignment_identity():
    pair = LandmarkPair("lamina", np.array([1.0, 0, 0]), np.array([2.0, 0, 0]))
    tf = align_vertebra_template({"c3": [pair]}, {"c3": [pair]})["c3"]
    assert tf.scale == pytest.approx(1.0)
    assert np.allclose(tf.rotation, np.eye(3), atol=1e-12)
    pts = np.array([[1.0, 0, 0], [2.0, 0, 0], [1.5, 0.5, 0.5]])
    assert np.allclose(tf.apply(pts), pts, atol=1e-12)


def test_vertebra_alignment_planted_rotation():
    a, b = np.array([1.0, 0.5, 0.0]), np.array([2.0, 1.5, 0.0])
    rot = axis_angle_to_matrix_np(np.array([0.0, 0.0, np.deg2rad(30)]))
    shift = np.array([1.0, 2.0, 3.0])
    tpl = {"c4": [LandmarkPair("body", a, b)]}
    scan = {"c4": [LandmarkPair("body", rot @ a + shift, rot @ b + shift)]}
    tf = align_vertebra_template(tpl, scan)["c4"]
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    mapped = tf.apply(np.stack([a, b]))
    assert np.abs(mapped - np.stack([rot @ a + shift, rot @ b + shift])).max() < 1e-9
    angle = np.arccos((np.trace(tf.rotation) - 1) / 2)
    assert angle == pytest.approx(np.deg2rad(30), abs=1e-9)


def test_vertebra_alignment_scale():
    a, b = np.zeros(3), np.array([1.0, 0, 0])
    tpl = {"c5": [LandmarkPair("p", a, b)]}
    scan = {"c5": [LandmarkPair("p", a, 2 * b)]}
    assert align_vertebra_template(tpl, scan)["c5"].scale == pytest.approx(2.0)


def test_vertebra_alignment_zero_length():
    tpl = {"c6": [LandmarkPair("p", np.zeros(3), np.zeros(3))]}
    with pytest.raises(SkeletonError, match="zero-length"):
        align_vertebra_template(tpl, tpl)


def test_joint_names_order():
    assert JOINT_NAMES == ("c7-t1", "c6-c7", "c5-c6", "c4-c5", "c3-c4", "c2-c3", "c1-c2", "o-c1")
