import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from audioscene.audio import FeatureConfig, read_wav
from audioscene.data import (
    BACKGROUND_RGB,
    SHAPES,
    TABLE1_COUNTS,
    Manifest,
    ManifestError,
    PairedExample,
    SynthSpec,
    apply_label_providers,
    batch_iterator,
    clean,
    index_batches,
    load_arrays,
    load_class_counts,
    load_image,
    object_area,
    read_label_sidecar,
    read_manifest,
    read_synth_meta,
    save_image,
    synth_image,
    synthesize_dataset,
    write_manifest,
)
from audioscene.models import CLASS_NAMES


def pairs(n, n_disagree, k=9):
    out = []
    for i in range(n):
        s = i % k
        out.append(PairedExample(f"e{i}", f"a{i}.wav", f"i{i}.png", s, (s + 1) % k if i < n_disagree else s))
    return Manifest(out)


def spearman(a, b):
    ra, rb = np.argsort(np.argsort(a)), np.argsort(np.argsort(b))
    return float(np.corrcoef(ra, rb)[0, 1])


FAST = dict(duration_s=0.05, image_size=16)


class TestClean:
    def test_discards_exact_fraction(self):
        kept, report = clean(pairs(100, 78))
        assert report.n_discarded == 78 and report.discard_fraction == 0.78
        assert len(kept) == 22
        assert all(e.sound_label == e.image_label for e in kept)

    def test_idempotent(self):
        once, _ = clean(pairs(50, 20))
        twice, report = clean(once)
        assert twice.examples == once.examples and report.n_discarded == 0

    def test_empty(self):
        kept, report = clean(Manifest([]))
        assert len(kept) == 0 and report.undefined
        assert "undefined" in report.summary()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), max_size=60))
    def test_kept_are_exactly_agreeing(self, labels):
        m = Manifest([PairedExample(f"x{i}", "a", "b", s, im) for i, (s, im) in enumerate(labels)])
        kept, report = clean(m)
        assert [e.id for e in kept] == [f"x{i}" for i, (s, im) in enumerate(labels) if s == im]
        assert report.n_kept + report.n_discarded == len(labels)

    def test_label_noise_rate(self, tmp_path):
        rho = 0.3
        spec = SynthSpec(class_names=CLASS_NAMES[:3], train_counts=(334, 333, 333), test_per_class=0,
                         label_noise=rho, **FAST)
        m = synthesize_dataset(spec, tmp_path, seed=4)
        _, report = clean(m)
        assert abs(report.discard_fraction - rho) <= 3 * np.sqrt(rho * (1 - rho) / 1000)

    def test_label_providers(self, tmp_path):
        m = pairs(3, 0)
        (tmp_path / "img.ndjson").write_text('{"id": "e1", "label": 5}\n')
        relabelled = apply_label_providers(m, image=read_label_sidecar(tmp_path / "img.ndjson"),
                                           sound=lambda e: e.sound_label)
        assert [e.image_label for e in relabelled] == [0, 5, 2]
        assert clean(relabelled)[1].n_discarded == 1


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = replace(pairs(5, 2), provenance="unit test")
        path = write_manifest(m, tmp_path / "m" / "manifest.ndjson")
        back = read_manifest(path)
        assert back.examples == m.examples
        assert back.classes == m.classes and back.provenance == "unit test"

    def test_duplicate_ids(self):
        e = PairedExample("a", "x", "y", 0, 0)
        with pytest.raises(ManifestError):
            Manifest([e, e])

    def test_bad_label(self):
        with pytest.raises(ManifestError):
            Manifest([PairedExample("a", "x", "y", 9, 0)])

    def test_malformed_line(self, tmp_path):
        (tmp_path / "manifest.ndjson").write_text('{"id": "a"}\n')
        with pytest.raises(ManifestError, match=":1:"):
            read_manifest(tmp_path / "manifest.ndjson")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "nope.ndjson")

    def test_class_counts(self):
        counts = load_class_counts(pairs(18, 0))
        assert counts == dict.fromkeys(CLASS_NAMES, 2)

    def test_corpus_table_total(self):
        assert sum(TABLE1_COUNTS.values()) == 10701
        assert set(TABLE1_COUNTS) == set(CLASS_NAMES)


class TestBatches:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 200), st.integers(1, 40), st.integers(0, 5), st.integers(0, 5))
    def test_partition(self, n, bs, seed, epoch):
        batches = index_batches(n, bs, seed, epoch)
        flat = np.concatenate(batches) if batches else np.array([], int)
        assert sorted(flat.tolist()) == list(range(n))
        assert all(len(b) == bs for b in batches[:-1])

    def test_order_depends_on_seed_and_epoch(self):
        items = list(range(30))
        a = list(batch_iterator(items, 7, 1, 0))
        assert a == list(batch_iterator(items, 7, 1, 0))
        assert a != list(batch_iterator(items, 7, 1, 1))
        assert a != list(batch_iterator(items, 7, 2, 0))
        assert [np.asarray(b).tolist() for b in index_batches(30, 7, 1, 0)] == a

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            index_batches(5, 0, 0, 0)


class TestImages:
    def test_round_trip(self, tmp_path, rng):
        x = rng.integers(0, 256, (3, 8, 8)).astype(np.float32) / 127.5 - 1
        save_image(tmp_path / "x.png", x)
        np.testing.assert_allclose(load_image(tmp_path / "x.png"), x, atol=1e-6)

    def test_object_area(self):
        x = np.empty((3, 10, 10))
        x[:] = (np.array(BACKGROUND_RGB) / 127.5 - 1)[:, None, None]
        assert object_area(x) == 0
        x[:, 2:5, 3:7] = 1.0
        assert object_area(x) == 12


class TestSynthetic:
    def test_determinism(self, tmp_path):
        spec = SynthSpec(class_names=CLASS_NAMES[:2], train_counts=(3, 3), test_per_class=1, **FAST)
        synthesize_dataset(spec, tmp_path / "a", seed=3)
        synthesize_dataset(spec, tmp_path / "b", seed=3)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 2 * 8 + 3
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_layout_and_decoding(self, tmp_path):
        spec = SynthSpec(class_names=CLASS_NAMES[:3], train_counts=(2, 2, 2), test_per_class=1, **FAST)
        m = synthesize_dataset(spec, tmp_path, seed=0)
        assert len(m.split("train")) == 6 and len(m.split("test")) == 3
        back = read_manifest(tmp_path / "manifest" / "manifest.ndjson")
        assert back.examples == m.examples and back.classes == CLASS_NAMES[:3]
        for e in back:
            w = read_wav(back.resolve(e.audio_path))
            assert len(w) == round(0.05 * 22050) and np.abs(w.samples).max() <= 0.33
            assert load_image(back.resolve(e.image_path)).shape == (3, 16, 16)
        meta = read_synth_meta(tmp_path / "manifest" / "manifest.ndjson")
        assert set(meta) == {e.id for e in back}
        assert json.loads((tmp_path / "manifest" / "classes.json").read_text())["classes"] == list(CLASS_NAMES[:3])

    def test_load_arrays(self, tmp_path):
        spec = SynthSpec(class_names=CLASS_NAMES[:2], train_counts=(2, 2), test_per_class=0, **FAST)
        m = synthesize_dataset(spec, tmp_path, seed=0)
        arr = load_arrays(m, FeatureConfig("mfcc"))
        assert arr.images.shape == (4, 3, 16, 16) and arr.conditions.shape == (4, 13)
        with pytest.raises(ManifestError):
            load_arrays(Manifest([]), FeatureConfig())

    def test_carriers_an_octave_apart(self):
        centres = SynthSpec().carrier_centers()
        assert (np.log2(centres[1:] / centres[:-1]) >= 1.0 - 1e-12).all()
        assert centres.min() >= 35 - 1e-9 and centres.max() <= 9000 + 1e-9

    def _areas(self, coupling, n=200):
        spec = SynthSpec(class_names=CLASS_NAMES[:1], coupling=coupling, image_size=64)
        rng = np.random.default_rng(11)
        lo, hi = np.log(spec.volume_range)
        vols = np.exp(rng.uniform(lo, hi, n))
        areas = []
        for v in vols:
            img = synth_image(spec, 0, v, rng).transpose(2, 0, 1) / 127.5 - 1
            areas.append(object_area(img))
        return vols, np.array(areas)

    def test_uncoupled_image_ignores_volume(self):
        spec = SynthSpec(class_names=CLASS_NAMES[:1], coupling=0.0, image_size=64)
        for seed in range(200):
            imgs = [synth_image(spec, 0, v, np.random.default_rng(seed)) for v in (0.04, 0.1, 0.32)]
            assert imgs[0].tobytes() == imgs[1].tobytes() == imgs[2].tobytes()

    def test_coupled_area_tracks_volume(self):
        vols, areas = self._areas(1.0)
        assert spearman(vols, areas) > 0.9

    def test_every_shape_draws(self):
        for k, shape in enumerate(SHAPES):
            spec = SynthSpec(class_names=tuple(f"c{i}" for i in range(9)), image_size=32)
            img = synth_image(spec, k, 0.1, np.random.default_rng(0)).transpose(2, 0, 1) / 127.5 - 1
            assert object_area(img) > 20, shape

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(coupling=-1)
        with pytest.raises(ValueError):
            SynthSpec(label_noise=1.0)
        with pytest.raises(ValueError):
            SynthSpec(class_names=CLASS_NAMES[:2], train_counts=(1,))
