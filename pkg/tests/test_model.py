import json

import numpy as np
import pytest

from nape.blendshapes import expression_offset, pose_offset, synthesize_shape
from nape.larynx import LarynxParams, larynx_displacement
from nape.model import (
    FullParams,
    LimitsWarning,
    ModelError,
    appearance,
    forward,
    identity_rest,
    load_model,
    rest_template,
    save_model,
)
from nape.pca import project
from nape.skeleton import default_limits


def _params(truth, i=0, frame=5):
    clip = truth.clips[i]
    return FullParams(
        beta=clip.beta, psi=clip.psi[frame], theta=clip.theta[frame],
        eta=clip.eta[frame], tau=clip.tau[frame],
    )


def test_zero_params_neutrality(tiny_truth):
    model = tiny_truth.model
    out = forward(model, model.zero_params())
    assert np.abs(out.vertices - model.template.vertices).max() == 0.0


def test_rest_template_mean_larynx_at_beta_zero(tiny_truth):
    model = tiny_truth.model
    params = FullParams(beta=np.zeros(5), psi=np.zeros(4), theta=np.zeros((8, 3)), eta=1.0, tau=0.0)
    out = rest_template(model, params)
    expected = model.template.vertices + larynx_displacement(
        model.larynx, model.template, LarynxParams(eta=1.0, tau=0.0), np.zeros(5)
    )
    assert np.array_equal(out.vertices, expected)


def test_rest_template_term_decomposition_bitwise(tiny_truth):
    model = tiny_truth.model
    params = _params(tiny_truth)
    out = rest_template(model, params)
    manual = (
        model.template.vertices
        + synthesize_shape(model.shape_space, params.beta)
        + larynx_displacement(
            model.larynx, model.template,
            LarynxParams(eta=params.eta, tau=params.tau, tau_max=model.tau_max), params.beta,
        )
        + expression_offset(model.expression_set(params.beta), params.psi)
        + pose_offset(model.pose_set(params.beta), params.theta)
    )
    assert np.array_equal(out.vertices, manual)


def test_forward_zero_pose_equals_rest_template(tiny_truth):
    model = tiny_truth.model
    clip = tiny_truth.clips[0]
    params = FullParams(
        beta=clip.beta, psi=clip.psi[4], theta=np.zeros((8, 3)), eta=clip.eta[4], tau=clip.tau[4]
    )
    assert np.array_equal(forward(model, params).vertices, rest_template(model, params).vertices)


def test_forward_topology_preserved(tiny_truth):
    model = tiny_truth.model
    out = forward(model, _params(tiny_truth))
    assert out.topology_id == model.template.topology_id


def test_forward_deterministic(tiny_truth):
    model = tiny_truth.model
    params = _params(tiny_truth, frame=9)
    assert np.array_equal(forward(model, params).vertices, forward(model, params).vertices)


def test_strict_limits_mode(tiny_truth):
    model = tiny_truth.model
    theta = np.zeros((8, 3))
    theta[0, 0] = 1.2  # far beyond any flexion limit
    params = FullParams(beta=np.zeros(5), psi=np.zeros(4), theta=theta)
    with pytest.raises(ModelError, match="limits"):
        forward(model, params, strict_limits=True)
    with pytest.warns(LimitsWarning):
        forward(model, params)


def test_appearance_mean_and_scaling(tiny_truth):
    model = tiny_truth.model
    app = model.appearance
    mean = appearance(model, np.zeros(app.space.n_components))
    assert np.array_equal(mean.reshape(-1), app.space.mean)
    e0 = np.zeros(app.space.n_components)
    e0[0] = 2.0
    out = appearance(model, e0)
    assert np.allclose(out.reshape(-1), app.space.mean + 2.0 * app.space.basis[:, 0], atol=1e-12)


def test_appearance_round_trip_training_textures(tiny_truth):
    from nape.learning import fit_appearance

    textures = tiny_truth.textures
    app = fit_appearance(textures, keep=textures.shape[0] - 1)
    for tex in textures:
        coeffs = project(app.space, tex.reshape(-1))
        rec = app.space.mean + app.space.basis @ coeffs
        rel = np.linalg.norm(rec - tex.reshape(-1)) / np.linalg.norm(tex)
        assert rel < 1e-6


def test_appearance_absent_errors(tiny_truth):
    from dataclasses import replace

    model = replace(tiny_truth.model, appearance=None)
    with pytest.raises(ModelError, match="appearance"):
        appearance(model, np.zeros(3))


def test_archive_round_trip_bitwise(tiny_truth, tmp_path):
    model = tiny_truth.model
    d1, d2 = tmp_path / "m1", tmp_path / "m2"
    save_model(model, d1)
    again = load_model(d1)
    save_model(again, d2)
    for p1 in sorted(d1.iterdir()):
        assert (d2 / p1.name).read_bytes() == p1.read_bytes()
    # loaded tensors reproduce the originals bitwise (they are f32-representable)
    assert np.array_equal(again.shape_space.basis, model.shape_space.basis)
    assert np.array_equal(again.skin_weights, model.skin_weights)
    assert np.array_equal(again.larynx.maps, model.larynx.maps)
    assert np.array_equal(again.template.vertices, model.template.vertices)


def test_archive_missing_manifest(tmp_path):
    with pytest.raises(ModelError, match="missing manifest"):
        load_model(tmp_path)


def test_archive_dimension_mismatch(tiny_truth, tmp_path):
    model = tiny_truth.model
    out = tmp_path / "m"
    save_model(model, out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["dims"]["n_vertices"] = 999
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ModelError, match="n_vertices"):
        load_model(out)


def test_archive_missing_tensor(tiny_truth, tmp_path):
    model = tiny_truth.model
    out = tmp_path / "m"
    save_model(model, out)
    (out / "skin_weights.hck").unlink()
    with pytest.raises(ModelError, match="skin_weights"):
        load_model(out)


def test_archive_version_mismatch(tiny_truth, tmp_path):
    model = tiny_truth.model
    out = tmp_path / "m"
    save_model(model, out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["version"] = 99
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ModelError, match="version"):
        load_model(out)


def test_model_consistency_validation(tiny_truth):
    from dataclasses import replace

    model = tiny_truth.model
    with pytest.raises(ModelError, match="dimension mismatch"):
        replace(model, n_expressions=7)


def test_params_validation(tiny_truth):
    model = tiny_truth.model
    with pytest.raises(ModelError, match="beta"):
        model.validate_params(FullParams(beta=np.zeros(2), psi=np.zeros(4), theta=np.zeros((8, 3))))
    with pytest.raises(Exception):
        model.validate_params(
            FullParams(beta=np.zeros(5), psi=np.full(4, 2.0), theta=np.zeros((8, 3)))
        )
