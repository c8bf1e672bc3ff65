"""Runtime invariant suite behind the ``verify`` subcommand.

Each check is a small seeded experiment named after the contract it guards;
the runner prints one PASS/FAIL line per check and reports failures.
"""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .blendshapes import BlendshapeSet, expression_offset, pose_offset, synthesize_shape
from .larynx import LarynxParams, larynx_offset, swallow_curve
from .learning import (
    FamilySmoothness,
    LossWeights,
    PAPER_LOSS_WEIGHTS,
    TemporalConfig,
    temporal_energy,
)
from .mesh import Mesh, graph_laplacian, laplacian_energy, load_obj, save_obj
from .model import FullParams, forward, load_model, save_model
from .paramio import read_params_csv, write_params_csv
from .pca import fit_pca, orthonormality_error, project, reconstruct
from .rotations import axis_angle_to_euler, axis_angle_to_matrix_np, euler_to_axis_angle
from .skeleton import (
    JointRegressor,
    LandmarkPair,
    Skeleton,
    adjacent_similarity_energy,
    align_vertebra_template,
    default_limits,
    fit_joint_regressor,
    forward_kinematics,
    linear_blend_skin,
    regress_joints,
    rotation_limit_energy,
)
from .synthesis import retarget_pose, rig_from_model, track_larynx
from .tensorio import read_tensor, write_tensor
from .uvmap import DisplacementMap, gather_from_uv, scatter_to_uv


def _tiny_truth(seed: int) -> ds.SyntheticTruth:
    cfg = ds.SyntheticConfig(
        n_vertices=320,
        n_shape=5,
        n_expressions=4,
        n_identities=12,
        clip_frames=16,
        n_subjects=2,
        uv_resolution=(64, 64),
        exp_pcs=3,
        pose_pcs=2,
        track_frames=4,
        track_resolution=(96, 96),
        recurrence_clips=3,
        recurrence_frames=20,
        appearance_count=5,
        seed=seed,
    )
    return ds.generate_dataset(cfg)


def check_forward_neutrality(truth: ds.SyntheticTruth, rng) -> None:
    model = truth.model
    out = forward(model, model.zero_params())
    dev = np.abs(out.vertices - model.template.vertices).max()
    assert dev == 0.0, f"neutral forward deviates by {dev} mm"


def check_lbs_rigid_oracle(truth: ds.SyntheticTruth, rng) -> None:
    model = truth.model
    skel = model.skeleton
    n = model.n_vertices
    for _ in range(10):
        joint = int(rng.integers(skel.n_joints))
        weights = np.zeros((n, skel.n_joints))
        weights[:, joint] = 1.0
        theta = rng.normal(scale=0.2, size=(skel.n_joints, 3))
        out = linear_blend_skin(model.template.vertices, skel, theta, weights)
        rots, trans = forward_kinematics(skel, theta)
        expected = model.template.vertices @ rots[joint].T + trans[joint]
        err = np.abs(out - expected).max()
        assert err < 1e-9, f"one-hot LBS differs from rigid transform by {err} mm"


def check_fk_root_rotation(truth: ds.SyntheticTruth, rng) -> None:
    skel = truth.model.skeleton
    theta = np.zeros((skel.n_joints, 3))
    theta[0] = rng.normal(scale=0.3, size=3)
    rots, trans = forward_kinematics(skel, theta)
    r0 = axis_angle_to_matrix_np(theta[0])
    root = skel.rest_positions[0]
    for k in range(skel.n_joints):
        assert np.allclose(rots[k], r0, atol=1e-12), "root-only pose must rotate every joint equally"
        posed = rots[k] @ skel.rest_positions[k] + trans[k]
        expected = r0 @ (skel.rest_positions[k] - root) + root
        assert np.allclose(posed, expected, atol=1e-9), "joints must rotate about the root rest position"


def check_obj_round_trip(truth: ds.SyntheticTruth, rng) -> None:
    mesh = truth.neutral_meshes[0]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.obj"
        save_obj(mesh, path)
        again = load_obj(path)
        assert np.array_equal(again.vertices, mesh.vertices), "OBJ vertex round trip not bitwise"
        assert np.array_equal(again.uv, mesh.uv) and np.array_equal(again.faces, mesh.faces)


def check_tensor_round_trip(truth: ds.SyntheticTruth, rng) -> None:
    arr = ds.quantize_f32(rng.normal(size=(3, 4, 5)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.hck"
        write_tensor(path, arr)
        again = read_tensor(path)
        assert np.array_equal(again, arr), "tensor round trip not bitwise"
        assert path.read_bytes()[:4] == b"HCK1"


def check_uv_scatter_gather(truth: ds.SyntheticTruth, rng) -> None:
    mesh = truth.model.template
    res = truth.model.larynx.resolution
    disp = rng.normal(size=(mesh.n_vertices, 3))
    dmap = scatter_to_uv(mesh, disp, res)
    back = gather_from_uv(mesh, dmap, 0.0)
    assert np.array_equal(back, disp), "zero-shift gather is not the identity"
    shift = 1.0 / res[0]
    a = gather_from_uv(mesh, dmap, shift)
    b = gather_from_uv(mesh, DisplacementMap(2.0 * dmap.data), shift)
    assert np.allclose(2.0 * a, b, atol=1e-12), "gather is not linear in the map"


def check_laplacian(truth: ds.SyntheticTruth, rng) -> None:
    mesh = truth.model.template
    lap = graph_laplacian(mesh)
    const = np.ones((mesh.n_vertices, 3)) * 3.7
    assert laplacian_energy(lap, const) < 1e-18, "constant field must be in the null space"
    field = rng.normal(size=(mesh.n_vertices, 3))
    dense = lap.toarray()
    brute = float(np.sum((dense @ field) ** 2))
    fast = laplacian_energy(lap, field)
    assert abs(brute - fast) <= 1e-10 * max(brute, 1.0), "sparse energy differs from dense oracle"


def check_rotation_round_trip(truth: ds.SyntheticTruth, rng) -> None:
    for _ in range(100):
        e = rng.uniform(-1.2, 1.2, size=3)
        r = euler_to_axis_angle(e)
        back = axis_angle_to_euler(r)
        assert np.abs(back - e).max() < 1e-9, "euler round trip exceeded 1e-9 rad"


def check_loss_term_oracles(truth: ds.SyntheticTruth, rng) -> None:
    limits = default_limits()
    for _ in range(50):
        theta = rng.normal(scale=0.2, size=(8, 3))
        fast = rotation_limit_energy(theta, limits)
        slow = 0.0
        for j in range(8):
            e = axis_angle_to_euler(theta[j], strict=False)
            for a in range(3):
                slow += max(e[a] - limits.bounds[j, a, 1], 0.0)
                slow += max(limits.bounds[j, a, 0] - e[a], 0.0)
        assert abs(fast - slow) < 1e-12, "E_rot differs from naive loop"
        fast = adjacent_similarity_energy(theta)
        slow = sum(float(np.sum((theta[i] - theta[i + 1]) ** 2)) for i in range(7))
        assert abs(fast - slow) < 1e-12 * max(slow, 1.0), "E_sim differs from naive loop"
    cfg = FamilySmoothness(1.0, 1.0, 5000.0, 0.15)
    for _ in range(50):
        seq = rng.normal(scale=0.3, size=17)
        fast = temporal_energy(seq, cfg)
        slow = 0.0
        for t in range(len(seq) - 1):
            slow += cfg.lam_1 * max(abs(seq[t + 1] - seq[t]) - cfg.eps, 0.0) ** 2
        for t in range(1, len(seq) - 1):
            slow += cfg.lam_2 * (seq[t + 1] - 2 * seq[t] + seq[t - 1]) ** 2
        slow *= cfg.lam_v
        assert abs(fast - slow) < 1e-12 * max(slow, 1.0), "E_tem differs from naive loop"


def check_paper_defaults(truth: ds.SyntheticTruth, rng) -> None:
    assert LossWeights().as_tuple() == PAPER_LOSS_WEIGHTS, "total-loss weights drifted"
    t = TemporalConfig()
    assert (t.psi.lam_2, t.theta.lam_2, t.eta.lam_2, t.tau.lam_2) == (0.01, 5000.0, 10.0, 1.0)
    assert (t.psi.eps, t.theta.eps, t.eta.eps, t.tau.eps) == (0.1, 0.15, 0.005, 0.001)


def check_pca_contract(truth: ds.SyntheticTruth, rng) -> None:
    samples = rng.normal(size=(9, 30)) @ rng.normal(size=(30, 30))
    space = fit_pca(samples, keep=8)
    assert orthonormality_error(space) < 1e-8, "basis not orthonormal"
    rec = reconstruct(space, project(space, samples[0]))
    rel = np.linalg.norm(rec - samples[0]) / max(np.linalg.norm(samples[0]), 1e-30)
    assert rel < 1e-6, "full-rank reconstruction failed"
    assert np.all(np.diff(np.cumsum(space.variance_ratio)) >= -1e-15), "cumulative curve not monotone"


def check_larynx_contract(truth: ds.SyntheticTruth, rng) -> None:
    model = truth.model
    basis, mesh = model.larynx, model.template
    outside = np.setdiff1d(np.arange(mesh.n_vertices), basis.region_vertices)
    for _ in range(25):
        beta = rng.normal(scale=30.0, size=model.n_shape)
        tau = float(rng.uniform(-0.05, 0.05))
        eta = float(rng.uniform(0.1, 2.0))
        p1 = LarynxParams(eta=1.0, tau=tau)
        base = larynx_offset(basis, mesh, p1, beta)
        scaled = larynx_offset(basis, mesh, LarynxParams(eta=eta, tau=tau), beta)
        assert np.abs(scaled - eta * base).max() < 1e-10, "eta homogeneity violated"
        b2 = rng.normal(scale=30.0, size=model.n_shape)
        lin = larynx_offset(basis, mesh, p1, beta + b2)
        split = base + larynx_offset(basis, mesh, p1, b2)
        assert np.abs(lin - split).max() < 1e-10, "beta linearity violated"
        assert np.all(scaled[outside] == 0.0), "displacement leaked outside the larynx region"


def check_model_archive_round_trip(truth: ds.SyntheticTruth, rng) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        d1 = Path(tmp) / "m1"
        d2 = Path(tmp) / "m2"
        save_model(truth.model, d1)
        again = load_model(d1)
        save_model(again, d2)
        files1 = sorted(p.name for p in d1.iterdir())
        files2 = sorted(p.name for p in d2.iterdir())
        assert files1 == files2, "archive file sets differ"
        for name in files1:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), f"{name} not bitwise stable"


def check_joint_regressor(truth: ds.SyntheticTruth, rng) -> None:
    matrix = rng.normal(size=(24, 5))
    bias = rng.normal(size=24)
    betas = [rng.normal(size=5) for _ in range(9)]
    pairs = [(b, (bias + matrix @ b).reshape(8, 3)) for b in betas]
    reg, residual = fit_joint_regressor(pairs)
    assert residual < 1e-8, "planted affine map not recovered"
    assert np.abs(reg.matrix - matrix).max() < 1e-8 and np.abs(reg.bias - bias).max() < 1e-8
    b = rng.normal(size=5)
    assert np.allclose(regress_joints(reg, b).reshape(-1), bias + matrix @ b, atol=1e-8)


def check_vertebra_alignment(truth: ds.SyntheticTruth, rng) -> None:
    a = rng.normal(size=3)
    b = a + rng.normal(size=3)
    tpl = {"c3": [LandmarkPair("lamina", a, b)]}
    angle = 0.5236
    rot = axis_angle_to_matrix_np(np.array([0.0, 0.0, angle]))
    scale = 1.7
    shift = np.array([1.0, 2.0, 3.0])
    scan = {
        "c3": [LandmarkPair("lamina", scale * rot @ a + shift, scale * rot @ b + shift)]
    }
    tf = align_vertebra_template(tpl, scan)["c3"]
    assert abs(tf.scale - scale) < 1e-9
    mapped = tf.apply(np.stack([a, b]))
    expected = np.stack([scale * rot @ a + shift, scale * rot @ b + shift])
    assert np.abs(mapped - expected).max() < 1e-9, "landmark pair not inverted exactly"


def check_tracker(truth: ds.SyntheticTruth, rng) -> None:
    tr = truth.tracking
    res = track_larynx(tr.frames[1], tr.kernel, tr.tau0)
    assert res.tau == float(tr.rows[1] - tr.tau0), "planted template row not recovered"
    h, w = 2 * ds.KERNEL_SIZE, 2 * ds.KERNEL_SIZE
    tiled = np.tile(tr.kernel, (2, 2, 1))[:h, :w]
    tie = track_larynx(tiled, tr.kernel, 0)
    assert tie.row == 0 and tie.col == 0, "ties must break to the smallest coordinates"


def check_retarget_identity(truth: ds.SyntheticTruth, rng) -> None:
    model = truth.model
    clip = truth.clips[0]
    params = FullParams(
        beta=clip.beta, psi=clip.psi[5], theta=clip.theta[5], eta=clip.eta[5], tau=clip.tau[5]
    )
    rig = rig_from_model(model, params)
    out = retarget_pose(params, rig, model.template.topology_id, model.skeleton.joint_names)
    ref = forward(model, params)
    assert np.array_equal(out.vertices, ref.vertices), "self-retarget is not bitwise identical"


def check_params_csv_round_trip(truth: ds.SyntheticTruth, rng) -> None:
    clip = truth.clips[0]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "p.csv"
        write_params_csv(path, clip.beta, clip.psi, clip.theta, clip.eta, clip.tau)
        back = read_params_csv(path)
        assert np.array_equal(back["theta"], clip.theta), "theta CSV round trip not bitwise"
        assert np.array_equal(back["psi"], clip.psi) and np.array_equal(back["tau"], clip.tau)


def check_forward_determinism(truth: ds.SyntheticTruth, rng) -> None:
    clip = truth.clips[0]
    params = FullParams(
        beta=clip.beta, psi=clip.psi[3], theta=clip.theta[3], eta=clip.eta[3], tau=clip.tau[3]
    )
    a = forward(truth.model, params).vertices
    b = forward(truth.model, params).vertices
    assert np.array_equal(a, b), "forward is not deterministic"


def check_swallow_curve(truth: ds.SyntheticTruth, rng) -> None:
    t = np.arange(60)
    pulse = 0.03 * np.exp(-0.5 * ((t - 30) / 5.0) ** 2)
    same = swallow_curve([pulse, pulse])
    assert np.abs(same - pulse).max() < 1e-12, "averaging identical clips must be the identity"
    shifted = np.roll(pulse, 7)
    merged = swallow_curve([pulse, shifted])
    rms = np.sqrt(np.mean((merged - pulse) ** 2))
    assert rms < 0.02 * np.sqrt(np.mean(pulse**2)) + 1e-6, "shift alignment failed"
    try:
        swallow_curve([np.full(40, 0.01)])
    except Exception as exc:
        assert "peak" in str(exc)
    else:
        raise AssertionError("peakless clip must raise")


ALL_CHECKS = [
    check_forward_neutrality,
    check_lbs_rigid_oracle,
    check_fk_root_rotation,
    check_obj_round_trip,
    check_tensor_round_trip,
    check_uv_scatter_gather,
    check_laplacian,
    check_rotation_round_trip,
    check_loss_term_oracles,
    check_paper_defaults,
    check_pca_contract,
    check_larynx_contract,
    check_model_archive_round_trip,
    check_joint_regressor,
    check_vertebra_alignment,
    check_tracker,
    check_retarget_identity,
    check_params_csv_round_trip,
    check_forward_determinism,
    check_swallow_curve,
]


def run_all(seed: int = 0, emit=print) -> int:
    """Run every invariant check; returns the number of failures."""
    torch.manual_seed(seed)
    truth = _tiny_truth(seed)
    failures = 0
    for check in ALL_CHECKS:
        rng = np.random.default_rng(seed + 1)
        name = check.__name__.removeprefix("check_")
        try:
            check(truth, rng)
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            emit(f"FAIL {name}: {exc}")
        else:
            emit(f"PASS {name}")
    return failures
