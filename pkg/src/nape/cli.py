"""Command-line entry point for the full pipeline.

Subcommands: gen-data, train-static, train-dynamic, fit, animate,
track-larynx, synth-larynx, synth-pose, retarget, pca-report, verify.
Exit codes: 0 success, 1 domain error, 2 usage error. Every run writes a
reproducibility header (version, seed, config hash) to <out>/run.log.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, apply_overrides, parse_kv_file
from .larynx import swallow_curve
from .learning import (
    DynamicConfig,
    FitConfig,
    SequenceClip,
    StaticConfig,
    fit_to_target,
    learn_dynamic,
    learn_static,
)
from .mesh import load_obj, save_obj
from .model import FullParams, HeadNeckModel, forward, load_model, save_model
from .paramio import read_params_csv, write_params_csv, write_sequence_csv
from .report import pca_report
from .skeleton import forward_kinematics
from .synthesis import (
    PredictorConfig,
    load_rig,
    predict_larynx_sequence,
    retarget_pose,
    track_larynx,
    train_larynx_predictor,
    train_orientation_net,
)
from .uvmap import scatter_to_uv
from . import dataset as ds


def _load_overrides(path: str | None) -> dict[str, str]:
    return parse_kv_file(path) if path else {}


def _write_run_log(out_dir: Path, command: str, seed: int, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    canon = json.dumps(settings, sort_keys=True, default=str)
    cfg_hash = hashlib.sha256(canon.encode()).hexdigest()[:16]
    lines = [
        f"tool=nape {__version__}",
        f"command={command}",
        f"seed={seed}",
        f"config_hash={cfg_hash}",
    ]
    (out_dir / "run.log").write_text("\n".join(lines) + "\n")


def _params_rows(payload: dict) -> list[FullParams]:
    t = payload["psi"].shape[0]
    return [
        FullParams(
            beta=payload["beta"][k],
            psi=payload["psi"][k],
            theta=payload["theta"][k],
            eta=float(payload["eta"][k]),
            tau=float(payload["tau"][k]),
        )
        for k in range(t)
    ]


def cmd_gen_data(args) -> int:
    overrides = _load_overrides(args.config)
    cfg = apply_overrides(ds.SyntheticConfig(seed=args.seed), overrides)
    truth = ds.generate_dataset(cfg)
    out = Path(args.out)
    ds.write_dataset(truth, out)
    _write_run_log(out, "gen-data", args.seed, vars(cfg))
    print(f"dataset written to {out} ({len(truth.neutral_meshes)} identities, "
          f"{len(truth.clips)} clips, N={truth.model.n_vertices})")
    return 0


def cmd_train_static(args) -> int:
    import dataclasses

    overrides = _load_overrides(args.config)
    truth = ds.read_dataset(args.data)
    cfg = StaticConfig(
        n_shape=truth.config.n_shape,
        uv_resolution=truth.config.uv_resolution,
    )
    cfg = apply_overrides(cfg, overrides)
    cfg = dataclasses.replace(cfg, mapping=apply_overrides(cfg.mapping, overrides))
    result = learn_static(
        truth.neutral_meshes,
        list(truth.larynx_displacements),
        truth.joint_annotations,
        truth.expression_scans,
        cfg,
    )
    model = HeadNeckModel(
        template=result.template,
        shape_space=result.shape_space,
        joint_regressor=result.joint_regressor,
        skeleton=truth.model.skeleton.__class__(
            rest_positions=result.joint_regressor.bias.reshape(-1, 3),
            joint_names=truth.model.skeleton.joint_names,
            parents=truth.model.skeleton.parents,
        ),
        skin_weights=truth.prior_weights,
        exp_space=result.exp_space,
        exp_net=result.exp_net,
        n_expressions=result.n_expressions,
        larynx=result.larynx_basis,
        limits=truth.model.limits,
        tau_max=truth.config.tau_max,
    )
    out = Path(args.out)
    save_model(model, out)
    (out / "static_report.txt").write_text(
        f"identities={len(truth.neutral_meshes)}\n"
        f"shape_components={result.shape_space.n_components}\n"
        f"joint_residual_mm={result.joint_residual_mm!r}\n"
        f"expression_identities={len(result.expression_sets)}\n"
    )
    _write_run_log(out, "train-static", args.seed, vars(cfg))
    print(f"static model written to {out} (joint residual {result.joint_residual_mm:.3g} mm)")
    return 0


def cmd_train_dynamic(args) -> int:
    import dataclasses

    overrides = _load_overrides(args.config)
    truth = ds.read_dataset(args.data)
    model = load_model(args.model)
    cfg = apply_overrides(DynamicConfig(seed=args.seed), overrides)
    cfg = dataclasses.replace(
        cfg,
        mapping=apply_overrides(cfg.mapping, overrides),
        weights=apply_overrides(cfg.weights, overrides),
    )
    clips = truth.clips
    if args.perturb:
        clips_init = ds.perturb(truth, ds.PerturbSpec(seed=args.seed + 1))
        clips = [
            SequenceClip(
                subject=c.subject, beta=c.beta, theta=p.theta, psi=p.psi,
                eta=p.eta, tau=p.tau, fps=c.fps, targets=c.targets,
            )
            for c, p in zip(truth.clips, clips_init)
        ]
    result = learn_dynamic(model, clips, truth.prior_weights, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    updated = HeadNeckModel(
        template=model.template,
        shape_space=model.shape_space,
        joint_regressor=model.joint_regressor,
        skeleton=model.skeleton,
        skin_weights=result.skin_weights,
        exp_space=model.exp_space,
        exp_net=model.exp_net,
        n_expressions=model.n_expressions,
        larynx=model.larynx,
        limits=model.limits,
        pose_space=result.pose_space,
        pose_net=result.pose_net,
        appearance=model.appearance,
        tau_max=model.tau_max,
    )
    save_model(updated, out)
    (out / "training.log").write_text("\n".join(result.log_lines) + "\n")
    report_lines = []
    for ref, est in zip(truth.clips, result.clips):
        theta_rms = float(np.sqrt(np.mean((ref.theta - est.theta) ** 2)))
        eta_rel = float(
            np.sqrt(np.mean((ref.eta - est.eta) ** 2)) / max(np.sqrt(np.mean(ref.eta**2)), 1e-30)
        )
        tau_rel = float(
            np.sqrt(np.mean((ref.tau - est.tau) ** 2)) / max(np.sqrt(np.mean(ref.tau**2)), 1e-30)
        )
        report_lines.append(
            f"{est.subject}\ttheta_rms_rad={theta_rms!r}\teta_rel={eta_rel!r}\ttau_rel={tau_rel!r}"
        )
        write_params_csv(
            out / f"params_{est.subject}.csv", est.beta, est.psi, est.theta, est.eta, est.tau
        )
    (out / "recovery_report.txt").write_text("\n".join(report_lines) + "\n")
    _write_run_log(out, "train-dynamic", args.seed, vars(cfg))
    print(f"dynamic model written to {out} ({len(result.history)} epochs)")
    return 0


def cmd_fit(args) -> int:
    overrides = _load_overrides(args.config)
    model = load_model(args.model)
    target = load_obj(args.target)
    cfg = apply_overrides(FitConfig(seed=args.seed), overrides)
    free = tuple(args.free.split(",")) if args.free else ("beta", "psi", "theta", "eta", "tau")
    init = model.zero_params()
    result = fit_to_target(model, target, init, free=free, config=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = result.params
    write_params_csv(out / "fitted.csv", p.beta, p.psi[None], p.theta[None], [p.eta], [p.tau])
    (out / "fit_report.txt").write_text(
        f"mean_distance_mm={result.mean_distance_mm!r}\nconverged={result.converged}\n"
        f"free={','.join(free)}\niterations={len(result.history)}\n"
    )
    _write_run_log(out, "fit", args.seed, {**vars(cfg), "free": free})
    print(f"fit residual {result.mean_distance_mm:.6g} mm -> {out}")
    return 0


def cmd_animate(args) -> int:
    model = load_model(args.model)
    payload = read_params_csv(args.params)
    rows = _params_rows(payload)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, params in enumerate(rows):
        mesh = forward(model, params, strict_limits=args.strict_limits)
        save_obj(mesh, out / f"frame_{k:04d}.obj")
    _write_run_log(out, "animate", args.seed, {"frames": len(rows), "strict": args.strict_limits})
    print(f"{len(rows)} frames written to {out}")
    return 0


def cmd_track_larynx(args) -> int:
    from .tensorio import read_tensor

    data = Path(args.data)
    frames = read_tensor(data / "tracking" / "frames.hck")
    kernel = read_tensor(data / "tracking" / "kernel.hck")
    rest = track_larynx(frames[0], kernel, 0.0)
    tau0 = rest.row  # rest position from the designated rest frame (frame 0)
    taus, rows, scores = [], [], []
    for fr in frames:
        res = track_larynx(fr, kernel, tau0)
        taus.append(res.tau)
        rows.append(float(res.row))
        scores.append(res.score)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sequence_csv(
        out / "tau.csv",
        {"tau": np.array(taus), "row": np.array(rows), "score": np.array(scores)},
    )
    _write_run_log(out, "track-larynx", args.seed, {"frames": len(frames), "tau0": tau0})
    print(f"tracked {len(frames)} frames (tau0 row {tau0}) -> {out}")
    return 0


def cmd_synth_larynx(args) -> int:
    overrides = _load_overrides(args.config)
    truth = ds.read_dataset(args.data)
    cfg = apply_overrides(PredictorConfig(seed=args.seed), overrides)
    clips = truth.recurrence
    n_test = max(1, len(clips) // 5)
    train, test = clips[:-n_test], clips[-n_test:]
    predictor = train_larynx_predictor(train, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rels = []
    for i, clip in enumerate(test):
        pred = predict_larynx_sequence(predictor, clip["psi"], history=clip["tau"][:1])
        rel = float(np.sqrt(np.mean((pred - clip["tau"]) ** 2)) / np.sqrt(np.mean(clip["tau"] ** 2)))
        rels.append(rel)
        write_sequence_csv(out / f"rollout_{i:02d}.csv", {"tau_pred": pred, "tau_true": clip["tau"]})
    (out / "summary.txt").write_text(
        "\n".join(f"clip_{i:02d} rel_rms={r!r}" for i, r in enumerate(rels))
        + f"\nmean_rel_rms={float(np.mean(rels))!r}\n"
    )
    _write_run_log(out, "synth-larynx", args.seed, vars(cfg))
    print(f"held-out rollout rel-RMS {float(np.mean(rels)):.4g} -> {out}")
    return 0


def cmd_synth_pose(args) -> int:
    from .synthesis import OrientationTrainConfig

    overrides = _load_overrides(args.config)
    truth = ds.read_dataset(args.data)
    model = truth.model
    pairs = []
    head = model.skeleton.n_joints - 1
    for clip in truth.clips:
        for f in range(clip.n_frames):
            rots, _ = forward_kinematics(model.skeleton, clip.theta[f])
            pairs.append((rots[head], clip.theta[f]))
    n_test = max(1, len(pairs) // 10)
    train, test = pairs[:-n_test], pairs[-n_test:]
    net = train_orientation_net(
        train, model.limits.bounds,
        apply_overrides(OrientationTrainConfig(seed=args.seed), overrides),
    )
    preds = np.stack([net.raw(r).reshape(-1, 3) for r, _ in test])
    refs = np.stack([t for _, t in test])
    rms = float(np.sqrt(np.mean((preds - refs) ** 2)))
    ref_rms = float(np.sqrt(np.mean(refs**2)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sequence_csv(
        out / "pose_pred.csv",
        {
            "theta_pred": preds.reshape(len(test), -1),
            "theta_true": refs.reshape(len(test), -1),
        },
    )
    (out / "summary.txt").write_text(
        f"held_out_rms_rad={rms!r}\nreference_rms_rad={ref_rms!r}\nrel={rms / max(ref_rms, 1e-30)!r}\n"
    )
    _write_run_log(out, "synth-pose", args.seed, {"pairs": len(pairs)})
    print(f"orientation->pose held-out RMS {rms:.4g} rad -> {out}")
    return 0


def cmd_retarget(args) -> int:
    model = load_model(args.model)
    rig = load_rig(args.rig)
    payload = read_params_csv(args.params)
    rows = _params_rows(payload)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, params in enumerate(rows):
        mesh = retarget_pose(
            params, rig, model.template.topology_id, model.skeleton.joint_names
        )
        save_obj(mesh, out / f"retarget_{k:04d}.obj")
    _write_run_log(out, "retarget", args.seed, {"frames": len(rows)})
    print(f"{len(rows)} retargeted frames written to {out}")
    return 0


def cmd_pca_report(args) -> int:
    truth = ds.read_dataset(args.data)
    out = Path(args.out)
    model = truth.model
    n = model.n_vertices
    shape_samples = np.stack(
        [(m.vertices - model.template.vertices).ravel() for m in truth.neutral_meshes]
    )
    res = truth.config.uv_resolution
    larynx_samples = np.stack(
        [
            scatter_to_uv(model.template, d, res).data.ravel()
            for d in truth.larynx_displacements
        ]
    )
    exp_samples = np.stack([s.deltas.ravel() for s in truth.expression_sets.values()])
    reports = [
        pca_report(shape_samples, "shape", out, seed=args.seed),
        pca_report(larynx_samples, "larynx", out, seed=args.seed),
        pca_report(exp_samples, "expression", out, seed=args.seed),
    ]
    pose_sets = [model.pose_set(truth.betas[i]) for i in range(truth.config.n_subjects)]
    if len(pose_sets) >= 3 and pose_sets[0] is not None:
        pose_samples = np.stack([p.deltas.ravel() for p in pose_sets])
        reports.append(pca_report(pose_samples, "pose", out, seed=args.seed))
    _write_run_log(out, "pca-report", args.seed, {"spaces": [r.name for r in reports]})
    for r in reports:
        print(
            f"{r.name}: {r.components[-1]} components, cumulative {100 * r.cumulative[-1]:.2f}%, "
            f"final test RMSE {r.test_mean_rmse[-1]:.4g} mm"
        )
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    failures = run_all(seed=args.seed)
    print(f"verify: {failures} failures")
    return 1 if failures else 0


def _add_common(parser: argparse.ArgumentParser, *names: str) -> None:
    if "config" in names:
        parser.add_argument("--config", help="key=value overrides file")
    if "seed" in names:
        parser.add_argument("--seed", type=int, default=0)
    if "out" in names:
        parser.add_argument("--out", required=True, help="output directory")
    if "model" in names:
        parser.add_argument("--model", required=True, help="model archive directory")
    if "data" in names:
        parser.add_argument("--data", required=True, help="dataset archive directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nape", description="parametric head-and-neck model pipeline"
    )
    parser.add_argument("--version", action="version", version=f"nape {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic ground-truth dataset")
    _add_common(p, "config", "seed", "out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-static", help="static stage: template, shape, larynx, joints, M_E")
    _add_common(p, "config", "seed", "out", "data")
    p.set_defaults(func=cmd_train_static)

    p = sub.add_parser("train-dynamic", help="dynamic stage: per-frame params, correctives, weights, M_P")
    _add_common(p, "config", "seed", "out", "model", "data")
    p.add_argument("--perturb", action="store_true", help="perturb initial parameters (recovery experiment)")
    p.set_defaults(func=cmd_train_dynamic)

    p = sub.add_parser("fit", help="fit parameters to a target mesh")
    _add_common(p, "config", "seed", "out", "model")
    p.add_argument("--target", required=True, help="target OBJ")
    p.add_argument("--free", help="comma list of free groups (beta,psi,theta,eta,tau)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("animate", help="params CSV -> OBJ sequence")
    _add_common(p, "seed", "out", "model")
    p.add_argument("--params", required=True, help="params CSV")
    p.add_argument("--strict-limits", action="store_true")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("track-larynx", help="track the larynx template in normal maps")
    _add_common(p, "seed", "out", "data")
    p.set_defaults(func=cmd_track_larynx)

    p = sub.add_parser("synth-larynx", help="train + roll out the expression->larynx predictor")
    _add_common(p, "config", "seed", "out", "data")
    p.set_defaults(func=cmd_synth_larynx)

    p = sub.add_parser("synth-pose", help="train the head-orientation -> pose mapping")
    _add_common(p, "config", "seed", "out", "data")
    p.set_defaults(func=cmd_synth_pose)

    p = sub.add_parser("retarget", help="apply source params to a same-topology rig")
    _add_common(p, "seed", "out", "model")
    p.add_argument("--params", required=True, help="params CSV")
    p.add_argument("--rig", required=True, help="rig archive directory")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("pca-report", help="compactness/generalization tables and figures")
    _add_common(p, "config", "seed", "out", "data")
    p.set_defaults(func=cmd_pca_report)

    p = sub.add_parser("verify", help="run the module invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
