import numpy as np
import pytest

from metrics import evaluate, sweep_hypothesis_counts
from model import SceneInputs
from synthdata import generate_scene
from trainer import load_train_config, train

pytestmark = pytest.mark.slow

SMALL = {"iterations": 800, "batch_size": 16, "lr": 1e-3, "log_every": 0,
         "model.n_layers": 4, "model.hidden": 32, "model.embed_dim": 16, "model.embed_hidden": 32,
         "model.head_hidden": 32}
RUNS = {
    "plain": {"use_mmd": False, "use_mask": False},
    "mmd": {"use_mmd": True, "use_mask": False},
    "mmd_mask": {"use_mmd": True, "use_mask": True},
    "mmd_two_samples": {"use_mmd": True, "use_mask": False, "n_samples": 2},
}


@pytest.fixture(scope="module")
def train_scenes():
    return [generate_scene(seed) for seed in range(256)]


@pytest.fixture(scope="module")
def eval_scenes():
    return [generate_scene(seed) for seed in range(10_000, 10_512)]


@pytest.fixture(scope="module")
def models(train_scenes):
    return {name: train(load_train_config(overrides={**SMALL, **extra}), train_scenes).model
            for name, extra in RUNS.items()}


@pytest.fixture(scope="module")
def reports(models, eval_scenes):
    return {name: evaluate(model, eval_scenes, n_hypotheses=100, seed=3) for name, model in models.items()}


def test_mmd_lowers_best_of_100_error(reports):
    assert reports["mmd"].aggregate["min_pve"] < reports["plain"].aggregate["min_pve"]


def test_mmd_sample_spread_tracks_heatmap_spread(reports):
    ratio = reports["mmd"].scenes["spread_ratio"].dropna()
    assert len(ratio)
    assert 0.7 <= ratio.mean() <= 1.3


def test_mask_loss_improves_plausibility_without_hurting_accuracy(reports):
    with_mask, without = reports["mmd_mask"].aggregate, reports["mmd"].aggregate
    assert with_mask["perc_in"] > without["perc_in"]
    assert with_mask["min_dist"] < without["min_dist"]
    assert with_mask["min_pve"] < 1.03 * without["min_pve"]


def test_more_mmd_samples_lower_best_of_100_error(reports):
    assert reports["mmd"].aggregate["min_pve"] < reports["mmd_two_samples"].aggregate["min_pve"]


def test_best_of_n_keeps_improving_with_more_hypotheses(models, eval_scenes):
    curve = sweep_hypothesis_counts(models["mmd"], eval_scenes[:128], [1, 5, 10, 25, 50, 100, 1000], seed=3)
    values = curve["min_pve"].to_numpy()
    assert np.all(np.diff(values) <= 0)
    assert values[-1] < values[-2]


def test_zero_latent_is_near_the_mode(models, eval_scenes):
    model = models["mmd"]
    rng = np.random.default_rng(11)
    for scene in eval_scenes[:8]:
        c = np.asarray(model.condition(SceneInputs.from_scene(scene)))[0]
        mode = model.flow.mode(c[None])
        samples = model.flow.sample(c, 100, rng).poses
        mode_lp = float(np.asarray(model.flow.log_prob(mode, c[None]))[0])
        sample_lp = np.asarray(model.flow.log_prob(samples, np.broadcast_to(c, (100, len(c)))))
        assert np.count_nonzero(mode_lp >= sample_lp) >= 90
