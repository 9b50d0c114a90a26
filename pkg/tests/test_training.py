import numpy as np
import pytest

from audioscene import checkpoint
from audioscene.data import PairedArrays
from audioscene.losses import preset
from audioscene.models import ModelConfig
from audioscene.training import (
    Adam,
    ConditionScaler,
    GeneratorBundle,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    adam_step,
    model_config_for,
)
from audioscene import autodiff as ad

MODEL = ModelConfig(cond_dim=5, noise_dim=4, n_classes=2, image_size=16, g_channels=(8, 8, 4, 4),
                    d_channels=(4, 4, 8, 8))


def toy_data(n=24, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    return PairedArrays(
        ids=[f"t{i}" for i in range(n)],
        images=rng.uniform(-1, 1, (n, 3, 16, 16)).astype(np.float32),
        conditions=rng.standard_normal((n, 5)) + 3 * labels[:, None],
        sound_labels=labels, image_labels=labels.copy(), n_classes=2,
    )


def trainer(loss="table5-g", seed=0, **kw):
    return Trainer(toy_data(), MODEL, TrainConfig(batch_size=8, seed=seed, noise_dim=4, **kw), preset(loss))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = np.array([1.0, -2.0], np.float32)
        out, m, v = adam_step(p, np.zeros(2, np.float32), np.zeros(2, np.float32), np.zeros(2, np.float32), 1, 2e-4)
        np.testing.assert_array_equal(out, p)

    def test_first_step_moves_by_lr(self):
        p = np.array([1.0, -2.0, 0.5])
        g = np.array([3.0, -0.01, 100.0])
        out, _, _ = adam_step(p, g, np.zeros(3), np.zeros(3), 1, 2e-4)
        np.testing.assert_allclose(out - p, -2e-4 * np.sign(g), rtol=1e-6)

    def test_converges_on_quadratic(self):
        w = ad.Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.01)
        for _ in range(2000):
            opt.step(ad.backward(ad.sum_(ad.mul(w, w))))
        assert w.data[0] ** 2 < 1e-3

    def test_missing_gradient_treated_as_zero(self):
        w = ad.Tensor(np.ones(2), requires_grad=True)
        opt = Adam({"w": w})
        opt.step({})
        np.testing.assert_array_equal(w.data, np.ones(2))
        assert opt.t == 1


class TestScaler:
    def test_standardizes(self, rng):
        x = rng.standard_normal((100, 3)) * [1, 5, 0] + [2, -1, 4]
        sc = ConditionScaler.fit(x)
        y = sc(x)
        np.testing.assert_allclose(y[:, :2].mean(axis=0), 0, atol=1e-5)
        np.testing.assert_allclose(y[:, :2].std(axis=0), 1, atol=1e-4)
        assert np.isfinite(y).all() and sc.std[2] == pytest.approx(1e-3)

    def test_identity(self):
        np.testing.assert_array_equal(ConditionScaler.identity(2)(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


class TestTrainer:
    def test_schedule_consumes_batches(self):
        t = trainer()
        t.step()
        # one D batch and five G batches out of three per epoch
        assert (t.epoch, t.batch_pos) == (2, 0)
        assert t.opt_d.t == 1 and t.opt_g.t == 5

    def test_liveness(self):
        t = trainer()
        params = {**t.G.named_tensors(), **{"D" + k: v for k, v in t.D.named_tensors().items()}}
        # with every hinge margin active the real and fake pulls on psi's bias cancel exactly
        del params["Dpsi.bias"]
        before = {k: v.data.copy() for k, v in params.items()}
        log = t.train(3)
        assert all(not np.array_equal(before[k], params[k].data) for k in before)
        assert [r["iter"] for r in log] == [1, 2, 3]
        assert set(log[0]) == {"iter", "d_loss", "g_loss", "aux_loss_real", "adv_terms", "wallclock_s"}
        assert log[0]["wallclock_s"] is None and log[0]["aux_loss_real"] is not None

    @pytest.mark.parametrize("loss", ["table5-b", "table5-c", "table5-d", "table5-e", "table5-f", "table5-g"])
    def test_every_preset_runs(self, loss):
        log = trainer(loss).train(1)
        assert np.isfinite(log[0]["d_loss"]) and np.isfinite(log[0]["g_loss"])
        assert ("gp" in log[0]["adv_terms"]) == (loss == "table5-b")

    def test_determinism(self, tmp_path):
        a, b = trainer(seed=3), trainer(seed=3)
        assert a.train(2) == b.train(2)
        a.save(tmp_path / "a.sgck")
        b.save(tmp_path / "b.sgck")
        assert (tmp_path / "a.sgck").read_bytes() == (tmp_path / "b.sgck").read_bytes()

    def test_seeds_differ(self):
        assert trainer(seed=1).train(1) != trainer(seed=2).train(1)

    def test_total_iterations(self):
        assert trainer(epochs=12).total_iterations == 6
        assert trainer(iterations=4).total_iterations == 4

    def test_architecture_follows_loss_flags(self):
        cfg = model_config_for(MODEL, preset("table5-c"))
        assert not cfg.use_projection and cfg.concat_condition and not cfg.use_spectral_norm
        assert model_config_for(MODEL, preset("table5-g")).use_projection

    def test_validation(self):
        data = toy_data()
        with pytest.raises(ValueError, match="conditions"):
            Trainer(data, ModelConfig(**{**MODEL.to_dict(), "cond_dim": 7}), TrainConfig(noise_dim=4), preset("table5-g"))
        data.sound_labels[0] = 5
        with pytest.raises(ValueError, match="labels"):
            Trainer(data, MODEL, TrainConfig(noise_dim=4), preset("table5-g"))
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path):
        t = trainer()
        t.train(2)
        t.save(tmp_path / "a.sgck")
        back = Trainer.from_checkpoint(tmp_path / "a.sgck", toy_data())
        back.save(tmp_path / "b.sgck")
        assert (tmp_path / "a.sgck").read_bytes() == (tmp_path / "b.sgck").read_bytes()

    @pytest.mark.parametrize("loss", ["table5-g", "table5-b"])
    def test_resume_equivalence(self, tmp_path, loss):
        straight = trainer(loss)
        full_log = straight.train(10)
        first = trainer(loss)
        log = first.train(5)
        first.save(tmp_path / "mid.sgck")
        resumed = Trainer.from_checkpoint(tmp_path / "mid.sgck", toy_data())
        log += resumed.train(5)
        assert log == full_log
        straight.save(tmp_path / "s.sgck")
        resumed.save(tmp_path / "r.sgck")
        assert (tmp_path / "s.sgck").read_bytes() == (tmp_path / "r.sgck").read_bytes()

    def test_truncated(self, tmp_path):
        t = trainer()
        t.save(tmp_path / "a.sgck")
        raw = (tmp_path / "a.sgck").read_bytes()
        for cut in (3, 10, len(raw) // 2, len(raw) - 1):
            (tmp_path / "t.sgck").write_bytes(raw[:cut])
            with pytest.raises(checkpoint.CheckpointError):
                Trainer.from_checkpoint(tmp_path / "t.sgck", toy_data())

    def test_version_mismatch(self, tmp_path):
        raw = checkpoint.encode({"kind": "trainer"}, {})
        (tmp_path / "v.sgck").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
        with pytest.raises(checkpoint.CheckpointError, match="version 2"):
            checkpoint.load(tmp_path / "v.sgck")

    def test_blob_round_trip(self, tmp_path, rng):
        blobs = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b/c": np.zeros(0, np.float32)}
        checkpoint.save(tmp_path / "x.sgck", {"k": [1, 2]}, blobs)
        meta, back = checkpoint.load(tmp_path / "x.sgck")
        assert meta == {"k": [1, 2]}
        for k in blobs:
            np.testing.assert_array_equal(back[k], blobs[k])
        assert not list(tmp_path.glob("*.tmp"))

    def test_wrong_kind(self, tmp_path):
        checkpoint.save(tmp_path / "x.sgck", {"kind": "eval_classifier"}, {})
        with pytest.raises(checkpoint.CheckpointError):
            GeneratorBundle.load(tmp_path / "x.sgck")

    def test_bundle_matches_trainer(self, tmp_path, rng):
        t = trainer()
        t.train(1)
        t.save(tmp_path / "a.sgck")
        bundle = GeneratorBundle.load(tmp_path / "a.sgck")
        conds, z = rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
        np.testing.assert_array_equal(bundle.generate(conds, z), t.generate(conds, z))
        raw = GeneratorBundle.load(tmp_path / "a.sgck", use_ema=False)
        np.testing.assert_array_equal(raw.generate(conds, z), t.G(t.scaler(conds), z.astype(np.float32)).data)


class TestWeightAverage:
    def test_starts_equal_to_generator(self):
        t = trainer()
        live = t.G.named_tensors()
        for name, p in t.G_ema.named_tensors().items():
            np.testing.assert_array_equal(p.data, live[name].data)

    def test_update_rule(self):
        t = trainer(g_ema_decay=0.9)
        before = {k: p.data.copy() for k, p in t.G_ema.named_tensors().items()}
        t.step()
        live = t.G.named_tensors()
        for name, p in t.G_ema.named_tensors().items():
            expect = 0.9 * before[name] + 0.1 * live[name].data
            np.testing.assert_allclose(p.data, expect, rtol=1e-6, atol=1e-7)

    def test_does_not_affect_training(self):
        a, b = trainer(g_ema_decay=0.0), trainer(g_ema_decay=0.99)
        assert a.train(3) == b.train(3)

    def test_disabled_samples_raw_weights(self):
        t = trainer(g_ema_decay=0.0)
        t.train(2)
        assert t.sampler is t.G

    def test_invalid_decay(self):
        for bad in (-0.1, 1.0):
            with pytest.raises(ValueError):
                TrainConfig(g_ema_decay=bad)


def test_divergence_dumps_state(tmp_path):
    t = trainer()
    t.G.layers["fc"].params.weight.data[0, 0] = np.inf
    with pytest.raises(TrainingDiverged):
        t.train(1, diagnostic_path=tmp_path / "diag.sgck")
    meta, _ = checkpoint.load(tmp_path / "diag.sgck")
    assert meta["iteration"] == 0
