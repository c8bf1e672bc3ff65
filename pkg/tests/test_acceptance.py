"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings. The synthetic desk-scale world (N=2000, 10 shape
components, 8 expression slots, 40 identities, 4 subjects x 120 frames at
30 fps) is generated once per session.
"""

import time

import numpy as np
import pytest
import torch

from nape import dataset as ds
from nape.larynx import LarynxParams, larynx_offset
from nape.learning import (
    DynamicConfig,
    FamilySmoothness,
    FitConfig,
    LossWeights,
    PAPER_LOSS_WEIGHTS,
    SequenceClip,
    StaticConfig,
    TemporalConfig,
    adjacent_similarity_torch,
    fit_to_target,
    learn_dynamic,
    learn_static,
    objective_gradient_check,
    temporal_energy,
)
from nape.mesh import Mesh, graph_laplacian, laplacian_energy
from nape.model import FullParams, forward
from nape.rotations import axis_angle_to_euler
from nape.skeleton import (
    default_limits,
    forward_kinematics,
    linear_blend_skin,
    rotation_limit_energy,
    adjacent_similarity_energy,
)
from nape.synthesis import retarget_pose, rig_from_model, track_larynx


def _report(criterion: int, ok: bool, detail: str, started: float) -> None:
    status = "PASS" if ok else "FAIL"
    elapsed = time.perf_counter() - started
    print(f"[criterion {criterion:02d}] {status} ({elapsed:.1f}s) {detail}", flush=True)
    assert ok, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="session")
def desk_truth():
    return ds.generate_dataset(ds.SyntheticConfig(seed=11))


@pytest.fixture(scope="session")
def grad_truth():
    cfg = ds.SyntheticConfig(
        n_vertices=320, n_shape=5, n_expressions=4, n_identities=12, clip_frames=8,
        n_subjects=1, uv_resolution=(64, 64), exp_pcs=3, pose_pcs=2, track_frames=2,
        recurrence_clips=2, recurrence_frames=20, appearance_count=4, seed=31,
    )
    return ds.generate_dataset(cfg)


def test_criterion_01_neutrality(desk_truth):
    t0 = time.perf_counter()
    model = desk_truth.model
    out = forward(model, model.zero_params())
    dev = float(np.abs(out.vertices - model.template.vertices).max())
    _report(1, dev == 0.0, f"neutral forward max deviation {dev} mm", t0)


def test_criterion_02_lbs_rigid_oracle(desk_truth):
    t0 = time.perf_counter()
    model = desk_truth.model
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        j = int(rng.integers(model.n_joints))
        weights = np.zeros((model.n_vertices, model.n_joints))
        weights[:, j] = 1.0
        theta = rng.normal(scale=0.3, size=(model.n_joints, 3))
        out = linear_blend_skin(model.template.vertices, model.skeleton, theta, weights)
        rots, trans = forward_kinematics(model.skeleton, theta)
        expected = model.template.vertices @ rots[j].T + trans[j]
        worst = max(worst, float(np.abs(out - expected).max()))
    _report(2, worst < 1e-9, f"one-hot LBS vs rigid transform, worst {worst:.3g} mm over 100 cases", t0)


def test_criterion_03_gradient_checks(grad_truth):
    t0 = time.perf_counter()
    clip = grad_truth.clips[0]
    worst_obj = 0.0
    for trial in range(20):
        report = objective_gradient_check(
            grad_truth.model, clip, rng=np.random.default_rng(100 + trial), max_checks_per_group=4
        )
        worst_obj = max(worst_obj, report.max_rel_error)
    # forward() vertex gradients through a random linear functional
    from nape.learning import _Engine

    engine = _Engine(grad_truth.model, torch.float64)
    rng = np.random.default_rng(7)
    worst_fwd = 0.0
    for _ in range(20):
        proj = torch.from_numpy(rng.normal(size=(grad_truth.model.n_vertices, 3)))
        beta = torch.tensor(clip.beta + rng.normal(scale=2.0, size=clip.beta.shape), requires_grad=True)
        theta = torch.tensor(clip.theta[:2] + rng.normal(scale=0.02, size=(2, 8, 3)), requires_grad=True)
        psi = torch.tensor(np.clip(clip.psi[:2] + rng.normal(scale=0.05, size=clip.psi[:2].shape), 0, 1.5), requires_grad=True)
        eta = torch.tensor(clip.eta[:2] + 0.01, requires_grad=True)
        tau = torch.tensor(clip.tau[:2] + 0.002, requires_grad=True)

        def f(b=beta, th=theta, ps=psi, et=eta, ta=tau):
            verts = engine.frames(
                engine.base_rest(b), engine.joints(b),
                torch.from_numpy(grad_truth.model.skin_weights), b, ps, th, et, ta,
                engine.exp_deltas(b), engine.pose_deltas(b),
            )
            return (verts * proj).sum()

        value = f()
        value.backward()
        for tensor, h in ((beta, 1e-4), (theta, 1e-5), (tau, 1e-6), (eta, 1e-5)):
            flat = tensor.detach().numpy().reshape(-1)
            g = tensor.grad.numpy().reshape(-1)
            i = int(rng.integers(flat.size))
            orig = flat[i]
            flat[i] = orig + h
            with torch.no_grad():
                up = float(f(beta.detach(), theta.detach(), psi.detach(), eta.detach(), tau.detach()))
            flat[i] = orig - h
            with torch.no_grad():
                down = float(f(beta.detach(), theta.detach(), psi.detach(), eta.detach(), tau.detach()))
            flat[i] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(g[i]), 1e-6)
            worst_fwd = max(worst_fwd, abs(fd - g[i]) / denom)
    ok = worst_obj < 1e-4 and worst_fwd < 1e-4
    _report(3, ok, f"objective grad rel {worst_obj:.3g}, forward grad rel {worst_fwd:.3g} over 20+20 configs", t0)


def test_criterion_04_loss_term_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    limits = default_limits()
    worst = 0.0
    for _ in range(1000):
        theta = rng.normal(scale=0.25, size=(8, 3))
        fast = rotation_limit_energy(theta, limits)
        slow = 0.0
        for j in range(8):
            e = axis_angle_to_euler(theta[j], strict=False)
            for a in range(3):
                slow += max(e[a] - limits.bounds[j, a, 1], 0.0)
                slow += max(limits.bounds[j, a, 0] - e[a], 0.0)
        worst = max(worst, abs(fast - slow))
        fast = adjacent_similarity_energy(theta)
        slow = sum(float(np.sum((theta[i] - theta[i + 1]) ** 2)) for i in range(7))
        worst = max(worst, abs(fast - slow))
    families = TemporalConfig()
    for name in ("psi", "theta", "eta", "tau"):
        cfg = families.for_family(name)
        for _ in range(1000):
            seq = rng.normal(scale=0.2, size=int(rng.integers(3, 16)))
            fast = temporal_energy(seq, cfg)
            slow = 0.0
            for t in range(len(seq) - 1):
                slow += cfg.lam_1 * max(abs(seq[t + 1] - seq[t]) - cfg.eps, 0.0) ** 2
            for t in range(1, len(seq) - 1):
                slow += cfg.lam_2 * (seq[t + 1] - 2 * seq[t] + seq[t - 1]) ** 2
            worst = max(worst, abs(fast - cfg.lam_v * slow) / max(1.0, abs(fast)))
    # E_smo vs naive neighbor loop on a small planted mesh
    quad = ds.generate_dataset(
        ds.SyntheticConfig(
            n_vertices=100, n_shape=3, n_expressions=3, n_identities=6, clip_frames=8,
            n_subjects=1, uv_resolution=(32, 32), exp_pcs=2, pose_pcs=1, track_frames=2,
            recurrence_clips=2, recurrence_frames=12, appearance_count=3, seed=5,
        )
    ).model.template
    lap = graph_laplacian(quad)
    neighbors = [[] for _ in range(quad.n_vertices)]
    from nape.mesh import mesh_edges

    for a, b in mesh_edges(quad.faces):
        neighbors[a].append(b)
        neighbors[b].append(a)
    for _ in range(1000):
        field = rng.normal(size=(quad.n_vertices, 3))
        slow = 0.0
        for i in range(quad.n_vertices):
            mean_nbr = np.mean([field[j] for j in neighbors[i]], axis=0)
            slow += float(np.sum((field[i] - mean_nbr) ** 2))
        fast = laplacian_energy(lap, field)
        worst = max(worst, abs(fast - slow) / max(1.0, abs(slow)))
    defaults_ok = (
        LossWeights().as_tuple() == PAPER_LOSS_WEIGHTS
        and (families.psi.lam_2, families.theta.lam_2, families.eta.lam_2, families.tau.lam_2)
        == (0.01, 5000.0, 10.0, 1.0)
        and (families.psi.eps, families.theta.eps, families.eta.eps, families.tau.eps)
        == (0.1, 0.15, 0.005, 0.001)
    )
    ok = worst < 1e-12 and defaults_ok
    _report(4, ok, f"naive-loop oracles worst {worst:.2g}; paper defaults exact: {defaults_ok}", t0)


def test_criterion_05_larynx_uv_contract(desk_truth):
    t0 = time.perf_counter()
    model = desk_truth.model
    basis, mesh = model.larynx, model.template
    rng = np.random.default_rng(5)
    outside = np.setdiff1d(np.arange(model.n_vertices), basis.region_vertices)
    h = basis.resolution[0]
    from nape.uvmap import texel_indices

    rows, cols = texel_indices(mesh.uv, basis.resolution)
    worst_hom = worst_lin = 0.0
    shift_exact = True
    locality = True
    for k in range(1000):
        beta = rng.normal(scale=40, size=model.n_shape)
        tau = float(rng.uniform(-0.08, 0.08))
        eta = float(rng.uniform(0.0, 2.0))
        base = larynx_offset(basis, mesh, LarynxParams(eta=1.0, tau=tau), beta)
        scaled = larynx_offset(basis, mesh, LarynxParams(eta=eta, tau=tau), beta)
        worst_hom = max(worst_hom, float(np.abs(scaled - eta * base).max()))
        if k < 200:
            b2 = rng.normal(scale=40, size=model.n_shape)
            both = larynx_offset(basis, mesh, LarynxParams(eta=1.0, tau=tau), beta + b2)
            split = base + larynx_offset(basis, mesh, LarynxParams(eta=1.0, tau=tau), b2)
            worst_lin = max(worst_lin, float(np.abs(both - split).max()))
        locality &= not scaled[outside].any()
        if k < 50:
            shift = int(rng.integers(-8, 9))
            got = larynx_offset(basis, mesh, LarynxParams(eta=1.0, tau=shift / h), beta)
            combo = np.einsum("c,chwd->hwd", beta, basis.maps)
            expected = np.zeros((model.n_vertices, 3))
            for v in basis.region_vertices:
                r = rows[v] + shift
                if 0 <= r < h:
                    expected[v] = combo[r, cols[v]]
            shift_exact &= bool(np.array_equal(got, expected))
    ok = worst_hom < 1e-10 and worst_lin < 1e-10 and shift_exact and locality
    _report(
        5, ok,
        f"homogeneity {worst_hom:.2g}, linearity {worst_lin:.2g}, integer shifts exact: "
        f"{shift_exact}, out-of-mask zero: {locality} (1000 draws)", t0,
    )


def test_criterion_06_static_round_trip(desk_truth):
    t0 = time.perf_counter()
    from scipy.linalg import subspace_angles

    res = learn_static(
        desk_truth.neutral_meshes,
        list(desk_truth.larynx_displacements),
        desk_truth.joint_annotations,
        desk_truth.expression_scans,
        StaticConfig(n_shape=10),
    )
    worst_rec = 0.0
    for mesh in desk_truth.neutral_meshes:
        disp = (mesh.vertices - res.template.vertices).ravel()
        rec = res.shape_space.basis @ (res.shape_space.basis.T @ disp)
        worst_rec = max(worst_rec, float(np.abs(rec - disp).max()))
    angle = float(
        subspace_angles(res.shape_space.basis, desk_truth.model.shape_space.basis).max()
    )
    ok = worst_rec < 1e-6 and angle < 1e-3 and res.joint_residual_mm < 1e-6
    _report(
        6, ok,
        f"40 ids, |beta|=10: reconstruction {worst_rec:.2g} mm, principal angle {angle:.2g} rad, "
        f"joint residual {res.joint_residual_mm:.2g} mm", t0,
    )


def test_criterion_07_dynamic_recovery(desk_truth):
    t0 = time.perf_counter()
    init = ds.perturb(desk_truth, ds.PerturbSpec(theta_sigma=0.05, seed=1))
    clips = [
        SequenceClip(
            subject=c.subject, beta=c.beta, theta=p.theta, psi=p.psi,
            eta=p.eta, tau=p.tau, fps=c.fps, targets=c.targets,
        )
        for c, p in zip(desk_truth.clips, init)
    ]
    cfg = DynamicConfig(epochs=150, warm_start_iters=80, patience=100, seed=0)
    res = learn_dynamic(desk_truth.model, clips, desk_truth.prior_weights, cfg)
    worst_theta = worst_eta = worst_tau = 0.0
    for c, e in zip(desk_truth.clips, res.clips):
        worst_theta = max(worst_theta, float(np.sqrt(np.mean((c.theta - e.theta) ** 2))))
        worst_eta = max(
            worst_eta,
            float(np.sqrt(np.mean((c.eta - e.eta) ** 2)) / np.sqrt(np.mean(c.eta**2))),
        )
        worst_tau = max(
            worst_tau,
            float(np.sqrt(np.mean((c.tau - e.tau) ** 2)) / np.sqrt(np.mean(c.tau**2))),
        )
    ok = worst_theta < 0.01 and worst_eta < 0.02 and worst_tau < 0.02 and len(res.history) <= 2000
    _report(
        7, ok,
        f"4 subjects x 120 frames, theta noise 0.05: theta RMS {worst_theta:.4f} rad, "
        f"eta rel {worst_eta:.4f}, tau rel {worst_tau:.4f} in {len(res.history)} epochs", t0,
    )


def test_criterion_08_fit_inversion(desk_truth):
    t0 = time.perf_counter()
    model = desk_truth.model
    clip = desk_truth.clips[2]
    f = 60
    p_star = FullParams(
        beta=clip.beta, psi=clip.psi[f], theta=clip.theta[f], eta=clip.eta[f], tau=clip.tau[f]
    )
    target = forward(model, p_star)
    tight = fit_to_target(
        model, target, model.zero_params(),
        config=FitConfig(shape_reg_weight=1e-6, adam_iters=400, lbfgs_iters=250),
    )
    rebuilt = forward(model, tight.params)
    param_dist = float(np.mean(np.linalg.norm(rebuilt.vertices - target.vertices, axis=1)))
    paper = fit_to_target(
        model, target, model.zero_params(), config=FitConfig(adam_iters=400, lbfgs_iters=250)
    )
    ok = tight.mean_distance_mm < 1e-3 and param_dist < 2e-3 and paper.mean_distance_mm < 0.1
    _report(
        8, ok,
        f"inversion {tight.mean_distance_mm:.2g} mm (params reproduce to {param_dist:.2g} mm); "
        f"paper weights (2, 0.01, 5e-5) residual {paper.mean_distance_mm:.3g} mm", t0,
    )


def test_criterion_09_tracker_equivariance(desk_truth):
    t0 = time.perf_counter()
    tr = desk_truth.tracking
    h, w = tr.frames.shape[1:3]
    ksz = tr.kernel.shape[0]
    rng = np.random.default_rng(9)
    noise = rng.normal(size=(h, w, 3))
    noise[..., 2] = np.abs(noise[..., 2]) + 2.0
    noise /= np.linalg.norm(noise, axis=-1, keepdims=True)
    col0 = (w - ksz) // 2
    exact = True
    for r in range(0, h - ksz + 1):
        frame = noise.copy()
        frame[r : r + ksz, col0 : col0 + ksz] = tr.kernel
        res = track_larynx(frame, tr.kernel, tr.tau0)
        exact &= res.tau == float(r - tr.tau0)
        exact &= res.row == r
    # one-for-one shift of the content
    base = noise.copy()
    base[10 : 10 + ksz, col0 : col0 + ksz] = tr.kernel
    shifted = np.roll(base, 7, axis=0)
    d0 = track_larynx(base, tr.kernel, 0.0)
    d1 = track_larynx(shifted, tr.kernel, 0.0)
    exact &= d1.row - d0.row == 7
    _report(9, exact, f"tau = r - tau0 exactly for all {h - ksz + 1} valid rows; shifts map 1:1", t0)


def test_criterion_10_sequence_predictor(desk_truth):
    t0 = time.perf_counter()
    from nape.synthesis import PredictorConfig, predict_larynx_sequence, train_larynx_predictor

    clips = desk_truth.recurrence
    n_test = 4
    predictor = train_larynx_predictor(
        clips[:-n_test], PredictorConfig(max_epochs=3000, patience=400, seed=0)
    )
    rels = []
    for clip in clips[-n_test:]:
        pred = predict_larynx_sequence(predictor, clip["psi"], history=clip["tau"][:1])
        rels.append(
            float(np.sqrt(np.mean((pred - clip["tau"]) ** 2)) / np.sqrt(np.mean(clip["tau"] ** 2)))
        )
    worst = max(rels)
    _report(10, worst < 0.01, f"held-out rollout rel RMS {worst:.4f} over {n_test} clips", t0)


def test_criterion_11_retarget_identity(desk_truth):
    t0 = time.perf_counter()
    model = desk_truth.model
    clip = desk_truth.clips[0]
    params = FullParams(
        beta=clip.beta, psi=clip.psi[30], theta=clip.theta[30], eta=clip.eta[30], tau=clip.tau[30]
    )
    rig = rig_from_model(model, params)
    out = retarget_pose(params, rig, model.template.topology_id, model.skeleton.joint_names)
    bitwise = np.array_equal(out.vertices, forward(model, params).vertices)
    other = desk_truth.retarget_rig
    zero = FullParams(
        beta=np.zeros(model.n_shape), psi=np.zeros(model.n_expressions), theta=np.zeros((8, 3))
    )
    rest = retarget_pose(zero, other)
    rest_exact = np.array_equal(rest.vertices, other.mesh.vertices)
    _report(11, bitwise and rest_exact, f"self-retarget bitwise: {bitwise}; distinct rig rest exact: {rest_exact}", t0)


def test_criterion_12_pca_report_protocol(desk_truth, tmp_path):
    t0 = time.perf_counter()
    from nape.report import pca_report

    shape_samples = np.stack(
        [
            (m.vertices - desk_truth.model.template.vertices).ravel()
            for m in desk_truth.neutral_meshes
        ]
    )
    report = pca_report(shape_samples, "shape", tmp_path, seed=0, train_fraction=0.9)
    monotone = bool(np.all(np.diff(report.test_mean_rmse) <= 1e-12))
    cumulative_ok = bool(np.all(np.diff(report.cumulative) >= -1e-15))
    files_ok = report.figure_png.exists() and report.compactness_csv.exists()
    ok = monotone and cumulative_ok and files_ok
    _report(
        12, ok,
        f"90/10 split: test error monotone non-increasing: {monotone}; cumulative variance "
        f"monotone: {cumulative_ok}; CSV+PNG written: {files_ok}", t0,
    )


def test_criterion_13_reproducibility(tmp_path):
    t0 = time.perf_counter()
    import hashlib

    from nape.cli import main
    from nape.model import load_model, save_model

    def tree_hash(root):
        h = hashlib.sha256()
        for path in sorted(root.rglob("*")):
            if path.is_file():
                h.update(str(path.relative_to(root)).encode())
                h.update(path.read_bytes())
        return h.hexdigest()

    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "n_vertices=200\nn_shape=3\nn_expressions=3\nn_identities=8\nclip_frames=10\n"
        "n_subjects=1\nuv_resolution=48 48\nexp_pcs=2\npose_pcs=1\ntrack_frames=3\n"
        "track_resolution=80 80\nrecurrence_clips=3\nrecurrence_frames=16\nappearance_count=4\n"
    )
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / f"data_{name}"
        assert main(["gen-data", "--seed", "3", "--out", str(out), "--config", str(cfg)]) == 0
        hashes.append(tree_hash(out))
    gen_ok = hashes[0] == hashes[1]

    model_hashes = []
    for name in ("a", "b"):
        out = tmp_path / f"model_{name}"
        assert main(["train-static", "--data", str(tmp_path / "data_a"), "--out", str(out), "--seed", "3"]) == 0
        model_hashes.append(tree_hash(out))
    static_ok = model_hashes[0] == model_hashes[1]

    model = load_model(tmp_path / "model_a")
    save_model(model, tmp_path / "model_c")
    archive_ok = tree_hash(tmp_path / "model_a") == tree_hash(tmp_path / "model_c")

    track_hashes = []
    for name in ("a", "b"):
        out = tmp_path / f"track_{name}"
        assert main(["track-larynx", "--data", str(tmp_path / "data_a"), "--out", str(out)]) == 0
        track_hashes.append(tree_hash(out))
    track_ok = track_hashes[0] == track_hashes[1]

    ok = gen_ok and static_ok and archive_ok and track_ok
    _report(
        13, ok,
        f"gen-data bitwise: {gen_ok}; train-static bitwise: {static_ok}; model archive "
        f"round trip bitwise: {archive_ok}; track-larynx bitwise: {track_ok}", t0,
    )
