import numpy as np
import pytest

from nape import dataset as ds


@pytest.fixture(scope="session")
def tiny_truth() -> ds.SyntheticTruth:
    """Small synthetic world shared by fast tests."""
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
        recurrence_frames=24,
        appearance_count=5,
        seed=7,
    )
    return ds.generate_dataset(cfg)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tetra_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("obj") / "tetra.obj"
    path.write_text(
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
        "vt 0.1 0.1\nvt 0.6 0.1\nvt 0.1 0.6\nvt 0.6 0.6\n"
        "f 1/1 2/2 3/3\nf 1/1 2/2 4/4\nf 1/1 3/3 4/4\nf 2/2 3/3 4/4\n"
    )
    return path
