import numpy as np
import pytest

import diffcore as dc
from body import NUM_DENSE_POINTS, NUM_JOINTS, POSE_DIM, REST_POSE_6D
from errors import CheckpointError, ConfigurationError
from model import MODEL_FORMAT, AmbiFlowModel, ModelTopology, SceneInputs

SMALL = ModelTopology(n_layers=2, hidden=8, embed_dim=6, embed_hidden=8, head_hidden=8)


def _inputs(batch=1, seed=0):
    rng = np.random.default_rng(seed)
    return SceneInputs(
        context=rng.normal(size=(batch, SMALL.ctx_dim)),
        keypoints_px=rng.uniform(60, 200, size=(batch, NUM_JOINTS, 2)),
        confidences=rng.uniform(0.3, 1.0, size=(batch, NUM_JOINTS)),
        bbox=np.tile([640.0, 480.0, 300.0], (batch, 1)),
        focal=np.full(batch, 1200.0),
        image_size=np.tile([1280.0, 960.0], (batch, 1)),
    )


def _perturbed_model(seed=0):
    model = AmbiFlowModel(SMALL, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, value in model.store.params.items():
        if name.startswith("flow.") or name.startswith("head.2"):
            model.store.set(name, rng.normal(scale=0.05, size=value.shape))
    return model


def test_topology_condition_dim():
    assert ModelTopology().cond_dim == 51
    assert SMALL.condition_layout() == {"context": 16, "pose_embedding": 6, "bbox_feature": 3}
    with pytest.raises(ConfigurationError):
        ModelTopology(hidden=0)


def test_fresh_model_predicts_rest_pose():
    model = AmbiFlowModel(SMALL)
    mode = model.mode_prediction(_inputs(batch=2))
    np.testing.assert_allclose(mode.poses, np.tile(REST_POSE_6D, (2, 1)), atol=1e-15)
    assert not mode.betas.any()
    assert mode.projections.shape == (2, NUM_JOINTS, 2)


def test_hypothesis_shapes():
    model = _perturbed_model()
    hyps = model.hypotheses(_inputs(), 7, np.random.default_rng(3))
    assert len(hyps) == 7
    assert hyps.poses.shape == (7, POSE_DIM)
    assert hyps.betas.shape == (7, 4)
    assert hyps.keypoints3d.shape == (7, NUM_JOINTS, 3)
    assert hyps.dense_points.shape == (7, NUM_DENSE_POINTS, 3)
    assert hyps.projections.shape == (7, NUM_JOINTS, 2)


def test_hypotheses_reject_batches():
    with pytest.raises(ConfigurationError):
        AmbiFlowModel(SMALL).hypotheses(_inputs(batch=2), 3, np.random.default_rng(0))


def test_zero_latent_hypothesis_equals_mode():
    model = _perturbed_model(2)
    inputs = _inputs(seed=4)
    hyps = model.hypotheses(inputs, 1, np.random.default_rng(0), latents=np.zeros((1, POSE_DIM)))
    mode = model.mode_prediction(inputs)
    np.testing.assert_allclose(hyps.poses, mode.poses, atol=1e-12)
    np.testing.assert_allclose(hyps.projections, mode.projections, atol=1e-9)


def test_batched_mode_matches_rows():
    model = _perturbed_model(5)
    inputs = _inputs(batch=3, seed=6)
    batched = model.mode_prediction(inputs)
    for b in range(3):
        row = model.mode_prediction(inputs.row(b))
        np.testing.assert_allclose(batched.projections[b], row.projections[0], atol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    model = _perturbed_model(7)
    path = model.save(tmp_path / "m.afck", {"iteration": 12})
    loaded, meta = AmbiFlowModel.load(path)
    assert meta["format"] == MODEL_FORMAT and meta["iteration"] == 12
    assert loaded.topology == SMALL
    inputs = _inputs(seed=8)
    a = model.hypotheses(inputs, 5, np.random.default_rng(9))
    b = loaded.hypotheses(inputs, 5, np.random.default_rng(9))
    np.testing.assert_array_equal(a.keypoints3d, b.keypoints3d)


def test_checkpoint_with_wrong_topology_is_rejected(tmp_path):
    model = AmbiFlowModel(SMALL)
    other = AmbiFlowModel(ModelTopology(n_layers=3, hidden=8, embed_dim=6, embed_hidden=8, head_hidden=8))
    path = dc.save_checkpoint(tmp_path / "bad.afck", model.store, other.metadata())
    with pytest.raises(CheckpointError):
        AmbiFlowModel.load(path)


def test_checkpoint_with_foreign_format_is_rejected(tmp_path):
    path = dc.save_checkpoint(tmp_path / "x.afck", AmbiFlowModel(SMALL).store, {"format": "something-else"})
    with pytest.raises(CheckpointError):
        AmbiFlowModel.load(path)
