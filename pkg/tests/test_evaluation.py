import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from audioscene.audio import FeatureConfig, Waveform, condition_from_waveform
from audioscene.data import SynthSpec, synth_image
from audioscene.evaluation import (
    ClassifierConfig,
    EvalClassifier,
    GateError,
    conditional_accuracy,
    fold_score,
    inception_score,
    inception_score_from_probs,
    kl_rows,
    make_grid,
    save_grid,
    train_eval_classifier,
    volume_probe,
)
from audioscene.models import CLASS_NAMES


def brute_force_is(probs, n_folds):
    size = len(probs) // n_folds
    scores = []
    for k in range(n_folds):
        fold = probs[k * size:(k + 1) * size]
        marginal = [sum(row[j] for row in fold) / len(fold) for j in range(len(fold[0]))]
        total = 0.0
        for row in fold:
            for j, p in enumerate(row):
                if p > 0:
                    total += p * math.log(p / marginal[j])
        scores.append(math.exp(total / len(fold)))
    return scores


def shapes(n_per_class, k=2, size=16, seed=0):
    spec = SynthSpec(class_names=CLASS_NAMES[:k], image_size=size)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per_class)
    imgs = np.stack([synth_image(spec, int(c), float(rng.uniform(0.05, 0.3)), rng) for c in labels])
    return (imgs.transpose(0, 3, 1, 2) / 127.5 - 1).astype(np.float32), labels


@pytest.fixture(scope="module")
def clf():
    x, y = shapes(60)
    hx, hy = shapes(20, seed=1)
    return train_eval_classifier(x, y, hx, hy, ClassifierConfig(n_classes=2, image_size=16, epochs=6))


class TestInceptionScore:
    def test_uniform_is_one(self):
        assert inception_score_from_probs(np.full((50, 4), 0.25)).mean == 1.0

    @pytest.mark.parametrize("k", [2, 5, 9])
    def test_balanced_one_hot_is_k(self, k):
        probs = np.eye(k)[np.tile(np.arange(k), 10)]
        rep = inception_score_from_probs(probs, n_folds=10, seed=None)
        assert rep.folds == [pytest.approx(k, abs=1e-12)] * 10
        assert rep.mean == pytest.approx(k, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.full(6, 0.3), size=103)
        probs[rng.random(probs.shape) < 0.1] = 0.0
        probs /= probs.sum(axis=1, keepdims=True)
        rep = inception_score_from_probs(probs, n_folds=10, seed=None)
        np.testing.assert_allclose(rep.folds, brute_force_is(probs.tolist(), 10), rtol=0, atol=1e-9)
        assert rep.n_images == 103

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 9))
    def test_bounds(self, seed, k):
        probs = np.random.default_rng(seed).dirichlet(np.full(k, 0.5), size=30)
        rep = inception_score_from_probs(probs, n_folds=3)
        assert all(1.0 <= f <= k for f in rep.folds)

    def test_seeded_determinism(self, rng):
        probs = rng.dirichlet(np.ones(4), size=64)
        a, b = inception_score_from_probs(probs, seed=3), inception_score_from_probs(probs, seed=3)
        assert a.to_record() == b.to_record()
        assert a.folds != inception_score_from_probs(probs, seed=4).folds

    def test_zero_probability_terms(self):
        assert kl_rows(np.array([[1.0, 0.0]]), np.array([0.5, 0.5]))[0] == pytest.approx(math.log(2))
        assert fold_score(np.array([[1.0, 0.0], [1.0, 0.0]])) == 1.0

    def test_too_few_images(self):
        with pytest.raises(ValueError):
            inception_score_from_probs(np.full((5, 2), 0.5))

    def test_real_images_beat_noise(self, clf):
        real, labels = shapes(30, seed=2)
        noise = np.random.default_rng(0).uniform(-1, 1, real.shape).astype(np.float32)
        rep = inception_score(real, clf, labels=labels, class_names=CLASS_NAMES[:2])
        assert rep.mean > inception_score(noise, clf).mean
        assert rep.clf_hash == clf.version_hash
        assert set(rep.per_class) == set(CLASS_NAMES[:2])


class TestConditionalAccuracy:
    def test_oracle_generator(self, clf):
        bank, labels = shapes(10, seed=3)
        conds = np.eye(2)[labels]
        oracle = lambda c, z: bank[np.arange(len(c)) % 10 + 10 * c.argmax(axis=1)]
        assert conditional_accuracy(oracle, conds, labels, clf, np.zeros((20, 1))) == 1.0

    def test_noise_generator_is_chance(self, clf):
        labels = np.tile([0, 1], 200)
        noise = lambda c, z: np.random.default_rng(int(z[0, 0])).uniform(-1, 1, (len(c), 3, 16, 16)).astype(np.float32)
        acc = conditional_accuracy(noise, np.zeros((400, 1)), labels, clf, np.arange(400.0)[:, None])
        assert abs(acc - 0.5) <= 3 * 0.5 / np.sqrt(400) + 1e-9

    def test_empty(self, clf):
        with pytest.raises(ValueError):
            conditional_accuracy(lambda c, z: c, np.zeros((0, 2)), np.zeros(0), clf, np.zeros((0, 1)))


class TestClassifier:
    def test_gate_passes(self, clf):
        assert clf.held_out_accuracy >= 0.9 and clf.frozen

    def test_gate_failure(self):
        x, y = shapes(10)
        with pytest.raises(GateError):
            train_eval_classifier(x, y, x, 1 - y, ClassifierConfig(n_classes=2, epochs=2))

    def test_single_class_warns(self, caplog):
        x, _ = shapes(5, k=1)
        with caplog.at_level(logging.WARNING):
            c = train_eval_classifier(x, np.zeros(5, int), x, np.zeros(5, int), ClassifierConfig(n_classes=1, epochs=1))
        assert "single class" in caplog.text
        assert c.held_out_accuracy == 1.0

    def test_save_load(self, clf, tmp_path):
        clf.save(tmp_path / "clf.sgck")
        back = EvalClassifier.load(tmp_path / "clf.sgck")
        assert back.version_hash == clf.version_hash
        x, _ = shapes(3, seed=9)
        np.testing.assert_array_equal(back.predict_proba(x), clf.predict_proba(x))


def fake_generator(conds, z):
    # one image per condition, brightness follows the first feature
    level = np.tanh(conds[:, :1] / 10.0)
    return np.broadcast_to(level[:, :, None, None], (len(conds), 3, 16, 16)) + 0 * z[:, :1, None, None]


class TestVolumeProbe:
    def test_unit_factor_equals_plain_generation(self, rng):
        cfg = FeatureConfig("fbank")
        waves = [Waveform(rng.uniform(-0.2, 0.2, 4000)) for _ in range(3)]
        z = rng.standard_normal((3, 4))
        res = volume_probe(fake_generator, waves, cfg, z, factors=[1.0])
        for i, w in enumerate(waves):
            plain = fake_generator(condition_from_waveform(w, cfg).vector[None], z[i:i + 1])
            np.testing.assert_array_equal(res.images[i, 0], plain[0])

    def test_shape_and_clipping(self, rng):
        waves = [Waveform(rng.uniform(-0.5, 0.5, 4000)) for _ in range(2)]
        res = volume_probe(fake_generator, waves, FeatureConfig("fbank"), rng.standard_normal((1, 4)))
        assert res.images.shape == (2, 4, 3, 16, 16) and res.areas.shape == (2, 4)
        assert (res.clip_fractions[:, :2] == 0).all() and (res.clip_fractions[:, 3] > 0).all()
        assert len(res.median_areas) == 4
        assert set(res.summary()) >= {"factors", "median_area", "non_decreasing"}

    def test_bad_factor(self, rng):
        with pytest.raises(ValueError):
            volume_probe(fake_generator, [Waveform(np.zeros(4000))], FeatureConfig(), np.zeros((1, 4)), factors=[0])


def test_grid(tmp_path):
    rows = np.zeros((2, 3, 3, 4, 4))
    rows[1, 2] = 1.0
    grid = make_grid(rows, sep=2)
    assert grid.shape == (2 * 4 + 3 * 2, 3 * 4 + 4 * 2, 3)
    assert (grid[8:12, 14:18] == 255).all() and (grid[2:6, 2:6] == 128).all()
    path = save_grid(tmp_path, "probe", 40, rows)
    assert path.name == "grid_probe_40.png" and path.is_file()
