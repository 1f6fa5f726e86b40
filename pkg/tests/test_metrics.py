import json

import numpy as np
import pandas as pd
import pytest
from scipy.spatial.transform import Rotation

from body import NUM_DENSE_POINTS, NUM_JOINTS
from errors import ConfigurationError
from masks import empty_mask
from metrics import (MM, REPORT_COLUMNS, evaluate, kp2d_error, kp3d_spread, min_of_n, mpjpe, pa_mpjpe, plausibility,
                     procrustes_align, pve, sample_spread, spread_ratio, sweep_hypothesis_counts)
from model import AmbiFlowModel, ModelTopology, SceneInputs
from synthdata import generate_scene


def _skeleton(seed=0):
    return np.random.default_rng(seed).normal(scale=300.0, size=(NUM_JOINTS, 3))


def test_mpjpe_examples():
    gt = _skeleton()
    assert mpjpe(gt, gt) == 0.0
    pred = gt.copy()
    pred[4] += [3.0, 4.0, 0.0]
    assert mpjpe(pred, gt) == pytest.approx(0.3125, abs=1e-12)


def test_mpjpe_matches_loop_and_batches():
    rng = np.random.default_rng(1)
    gt = _skeleton(1)
    preds = gt + rng.normal(scale=20.0, size=(5, NUM_JOINTS, 3))
    for pred, value in zip(preds, mpjpe(preds, gt)):
        loop = np.mean([np.linalg.norm((pred[j] - pred[0]) - (gt[j] - gt[0])) for j in range(NUM_JOINTS)])
        assert abs(value - loop) < 1e-12


def test_pa_mpjpe_removes_similarity():
    rng = np.random.default_rng(2)
    gt = _skeleton(2)
    for _ in range(10):
        rot = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        pred = rng.uniform(0.5, 2.0) * gt @ rot.T + rng.normal(scale=100.0, size=3)
        assert pa_mpjpe(pred, gt) < 1e-9
    assert pa_mpjpe(gt, gt) < 1e-9


def test_pa_mpjpe_of_single_offset_joint_stays_below_mpjpe():
    gt = _skeleton()
    pred = gt.copy()
    pred[4] += [3.0, 4.0, 0.0]
    assert pa_mpjpe(pred, gt) <= 0.3125 + 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_pa_mpjpe_is_bounded_by_both_alignments(seed):
    rng = np.random.default_rng(seed)
    gt = _skeleton(seed)
    pred = gt @ Rotation.random(random_state=seed).as_matrix().T + rng.normal(scale=60.0, size=gt.shape)
    least_squares = np.linalg.norm(procrustes_align(pred, gt) - gt, axis=-1).mean()
    value = pa_mpjpe(pred, gt)
    assert value <= mpjpe(pred, gt) + 1e-9
    assert value <= least_squares + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_pa_mpjpe_ignores_similarity_of_prediction(seed):
    rng = np.random.default_rng(seed + 40)
    gt = _skeleton(seed)
    pred = gt + rng.normal(scale=40.0, size=gt.shape)
    rot = Rotation.random(random_state=seed).as_matrix()
    moved = 1.7 * pred @ rot.T + [100.0, -50.0, 20.0]
    assert pa_mpjpe(moved, gt) == pytest.approx(pa_mpjpe(pred, gt), abs=1e-2)


def test_pa_mpjpe_never_exceeds_mpjpe_on_generated_scenes():
    model = AmbiFlowModel(ModelTopology(n_layers=2, hidden=8, embed_dim=6, embed_hidden=8, head_hidden=8))
    for seed in range(256):
        scene = generate_scene(seed)
        mode = model.mode_prediction(SceneInputs.from_scene(scene))
        pred, gt = mode.keypoints3d[0] * MM, scene.joints3d() * MM
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9, seed


def test_procrustes_is_optimal_against_random_similarities():
    rng = np.random.default_rng(3)
    gt = _skeleton(3)
    pred = gt + rng.normal(scale=40.0, size=gt.shape)
    # 평균 거리가 아닌 제곱합이 최소화 대상이다
    best = np.sum((procrustes_align(pred, gt) - gt) ** 2)
    x = pred - pred.mean(axis=0)
    for _ in range(200):
        rot = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        candidate = rng.uniform(0.8, 1.2) * x @ rot.T + gt.mean(axis=0)
        assert best <= np.sum((candidate - gt) ** 2) + 1e-6


def test_procrustes_rejects_reflections():
    gt = _skeleton(4)
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned = procrustes_align(mirrored, gt)
    x = mirrored - mirrored.mean(axis=0)
    y = aligned - aligned.mean(axis=0)
    rotation, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert np.linalg.det(rotation) > 0


def test_procrustes_degenerate_falls_back_to_translation():
    gt = _skeleton(5)
    pred = np.ones((NUM_JOINTS, 3))
    np.testing.assert_allclose(procrustes_align(pred, gt), np.tile(gt.mean(axis=0), (NUM_JOINTS, 1)))
    with pytest.raises(ConfigurationError):
        pa_mpjpe(np.zeros((2, 3)), np.zeros((2, 3)))


def test_pve_examples():
    gt = np.random.default_rng(6).normal(scale=300.0, size=(NUM_DENSE_POINTS, 3))
    assert pve(gt, gt) == 0.0
    assert pve(gt + [10.0, 0.0, 0.0], gt) == pytest.approx(0.0, abs=1e-12)
    pred = gt.copy()
    pred[30, 1] += 7.6
    assert pve(pred, gt) == pytest.approx(0.1, abs=1e-12)
    assert pve(gt + [10.0, 0.0, 0.0], gt, aligned=False) == pytest.approx(10.0)


def test_min_of_n():
    errors = {"mpjpe": np.array([5.0, 2.0, 7.0, 0.0]), "pve": np.array([1.0, 3.0, 0.5, 4.0])}
    assert min_of_n(errors, 1) == {"mpjpe": 5.0, "pve": 1.0}
    assert min_of_n(errors, 3) == {"mpjpe": 2.0, "pve": 0.5}
    assert min_of_n(errors["mpjpe"], 4) == 0.0
    with pytest.raises(ConfigurationError):
        min_of_n(errors, 0)


def test_gt_among_hypotheses_gives_zero_min_error():
    gt = _skeleton(7)
    hyps = gt + np.random.default_rng(8).normal(scale=30.0, size=(6, NUM_JOINTS, 3))
    hyps[3] = gt
    assert min_of_n(mpjpe(hyps, gt), 6) == 0.0


def test_kp2d_error_examples():
    gt = np.random.default_rng(9).uniform(0, 256, size=(NUM_JOINTS, 2))
    visible = np.ones(NUM_JOINTS, bool)
    assert kp2d_error(gt, gt[None], gt, visible) == (0.0, 0.0)
    shifted = gt + [3.0, 0.0]
    mode, samples = kp2d_error(shifted, np.stack([shifted, shifted]), gt, visible)
    assert mode == pytest.approx(3.0) and samples == pytest.approx(3.0)
    assert all(np.isnan(v) for v in kp2d_error(gt, gt[None], gt, np.zeros(NUM_JOINTS, bool)))


def test_spread_examples():
    same = np.tile(_skeleton(10), (4, 1, 1))
    np.testing.assert_allclose(sample_spread(same), 0.0, atol=1e-9)
    d = 6.0
    pair = np.zeros((2, 1, 3))
    pair[0, 0, 0], pair[1, 0, 0] = d / 2, -d / 2
    assert sample_spread(pair)[0] == pytest.approx(d / 2)
    rng = np.random.default_rng(11)
    samples = rng.normal(size=(7, 5, 3))
    mean = samples.mean(axis=0)
    loop = [np.mean([np.linalg.norm(samples[i, k] - mean[k]) for i in range(7)]) for k in range(5)]
    np.testing.assert_allclose(sample_spread(samples), loop, atol=1e-12)
    visible = np.array([True, False, True, False, False])
    vis, invis = kp3d_spread(samples, visible)
    assert vis == pytest.approx(np.mean(np.array(loop)[visible]))
    assert invis == pytest.approx(np.mean(np.array(loop)[~visible]))


def test_plausibility_examples():
    mask = empty_mask()
    mask.pixels[100:150, 100:150] = True
    inside = np.random.default_rng(12).uniform(101, 149, size=(20, 2))
    assert plausibility(inside, mask) == (100.0, 0.0)
    outside = np.column_stack([np.full(10, 154.5), np.linspace(110, 140, 10)])
    perc_in, min_dist = plausibility(outside, mask)
    assert perc_in == 0.0 and min_dist == pytest.approx(5.0)


def test_plausibility_matches_pixel_scan():
    rng = np.random.default_rng(13)
    for _ in range(20):
        mask = empty_mask()
        for _ in range(3):
            x0, y0 = rng.integers(0, 220, size=2)
            mask.pixels[y0:y0 + rng.integers(5, 30), x0:x0 + rng.integers(5, 30)] = True
        points = rng.uniform(-20, 276, size=(40, 2))
        perc_in, min_dist = plausibility(points, mask)
        ys, xs = np.nonzero(mask.pixels)
        q = np.floor(points).astype(int)
        hit = np.array([0 <= x < 256 and 0 <= y < 256 and mask.pixels[y, x] for x, y in q])
        assert perc_in == pytest.approx(100.0 * hit.mean(), abs=1e-9)
        if hit.all():
            continue
        dist = [np.sqrt(np.min((xs - x) ** 2 + (ys - y) ** 2)) for x, y in q[~hit]]
        assert abs(min_dist - np.mean(dist)) < 1e-9


def test_spread_ratio_of_matching_sets_is_one():
    rng = np.random.default_rng(14)
    samples = rng.normal(size=(30, 3, 2))
    heatmap_samples = np.swapaxes(samples, 0, 1)
    assert spread_ratio(samples, heatmap_samples, np.array([True, True, False])) == pytest.approx(1.0)
    assert np.isnan(spread_ratio(samples, heatmap_samples, np.zeros(3, bool)))


@pytest.fixture(scope="module")
def small_setup():
    model = AmbiFlowModel(ModelTopology(n_layers=2, hidden=8, embed_dim=6, embed_hidden=8, head_hidden=8), seed=1)
    rng = np.random.default_rng(2)
    for name, value in model.store.params.items():
        if name.startswith("flow."):
            model.store.set(name, rng.normal(scale=0.05, size=value.shape))
    return model, [generate_scene(seed) for seed in range(4)]


def test_evaluate_report(tmp_path, small_setup):
    model, scenes = small_setup
    report = evaluate(model, scenes, n_hypotheses=6, seed=3)
    assert list(report.scenes.columns) == REPORT_COLUMNS and len(report.scenes) == 4
    assert list(report.scenes["seed"]) == [0, 1, 2, 3]
    assert report.aggregate["min_pve"] >= 0.0
    assert report.aggregate["min_mpjpe"] == pytest.approx(report.scenes["min_mpjpe"].mean())
    threaded = evaluate(model, scenes, n_hypotheses=6, seed=3, threads=2)
    pd.testing.assert_frame_equal(report.scenes, threaded.scenes)

    report.write(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["n_hypotheses"] == 6 and len(data["scenes"]) == 4
    report.write(tmp_path / "r.csv")
    table = pd.read_csv(tmp_path / "r.csv")
    assert len(table) == 5 and str(table["scene"].iloc[-1]) == "all"


def test_sweep_is_non_increasing(small_setup):
    model, scenes = small_setup
    curve = sweep_hypothesis_counts(model, scenes, [8, 1, 4], seed=0)
    assert list(curve["n"]) == [1, 4, 8]
    for column in ("min_mpjpe", "min_pa_mpjpe", "min_pve"):
        assert np.all(np.diff(curve[column].to_numpy()) <= 1e-12)
    with pytest.raises(ConfigurationError):
        sweep_hypothesis_counts(model, scenes, [0, 2])
