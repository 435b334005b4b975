import json

import numpy as np
import pytest

from clearsky.evalkit import psnr
from clearsky.labels import Weather
from clearsky.weathergen import (
    DatasetManifest,
    DegradationSpec,
    SceneSpec,
    apply_haze,
    apply_rain,
    apply_snow,
    degrade,
    load_image,
    make_dataset,
    save_image,
    synth_clean,
)

# tuned once against the 15-30 dB target band (100 seeded draws per class,
# seed 123); frozen here as a regression bound on the generator defaults
PSNR_CLASS_MEAN_RANGE = (16.0, 26.0)
PSNR_HARD_RANGE = (12.0, 31.5)
PSNR_IN_BAND_MIN_FRACTION = 0.90


class TestSynthClean:
    def test_deterministic(self):
        a = synth_clean(SceneSpec(48, 5))
        b = synth_clean(SceneSpec(48, 5))
        np.testing.assert_array_equal(a, b)

    def test_range(self):
        img = synth_clean(SceneSpec(64, 9))
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_has_edges(self):
        img = synth_clean(SceneSpec(64, 3))
        gray = img.mean(-1)
        grad = np.abs(np.diff(gray, axis=0)).mean() + np.abs(np.diff(gray, axis=1)).mean()
        assert grad > 0.01  # a constant image would be ~0

    def test_different_seeds_differ(self):
        assert not np.array_equal(synth_clean(SceneSpec(32, 1)), synth_clean(SceneSpec(32, 2)))


class TestHaze:
    def test_uniform_case_formula(self):
        # J=0.8, A=1.0, tau=0.5 -> I = 0.9; force tau via beta*d: use the
        # scalar composition directly on a constant depth field
        clean = np.full((16, 16, 3), 0.8)
        tau = 0.5
        out = clean * tau + 1.0 * (1 - tau)
        np.testing.assert_allclose(out, 0.9, atol=1e-12)

    def test_beta_zero_is_identity(self):
        clean = synth_clean(SceneSpec(32, 4))
        spec = DegradationSpec(kind=Weather.HAZE, airlight=0.9, beta_scatter=0.0, depth_seed=1)
        np.testing.assert_allclose(apply_haze(clean, spec), clean, atol=1e-12)

    def test_matches_scalar_oracle(self):
        from clearsky.weathergen import _depth_field

        clean = synth_clean(SceneSpec(24, 8))
        spec = DegradationSpec(kind=Weather.HAZE, airlight=0.85, beta_scatter=1.7, depth_seed=12)
        out = apply_haze(clean, spec)
        d = _depth_field(24, 12)
        for idx in [(0, 0), (5, 17), (23, 23)]:
            tau = np.exp(-1.7 * d[idx])
            for ch in range(3):
                expected = min(max(clean[idx + (ch,)] * tau + 0.85 * (1 - tau), 0.0), 1.0)
                assert out[idx + (ch,)] == pytest.approx(expected, abs=1e-12)

    def test_depth_field_in_unit_range(self):
        from clearsky.weathergen import _depth_field

        d = _depth_field(32, 3)
        assert d.min() >= 0.0 and d.max() <= 1.0


class TestOverlays:
    def test_empty_overlays_are_identity(self):
        clean = synth_clean(SceneSpec(32, 2))
        rain = DegradationSpec(kind=Weather.RAIN, streak_count=0)
        snow = DegradationSpec(kind=Weather.SNOW, particle_count=0, veiling=0.0)
        np.testing.assert_array_equal(apply_rain(clean, rain), clean)
        np.testing.assert_array_equal(apply_snow(clean, snow), clean)

    def test_overlays_brighten(self, rng):
        clean = synth_clean(SceneSpec(48, 6))
        rain = DegradationSpec.random(Weather.RAIN, rng)
        snow = DegradationSpec.random(Weather.SNOW, rng)
        for out in (apply_rain(clean, rain), apply_snow(clean, snow)):
            assert out.mean() > clean.mean()
            assert np.all(out >= clean - 1e-6)

    def test_psnr_band_regression(self):
        rng = np.random.default_rng(123)
        per_class = {k: [] for k in Weather}
        for _ in range(100):
            clean = synth_clean(SceneSpec(64, int(rng.integers(1 << 31))))
            for kind in Weather:
                spec = DegradationSpec.random(kind, rng)
                per_class[kind].append(psnr(degrade(clean, spec), clean))
        for kind, values in per_class.items():
            values = np.asarray(values)
            assert PSNR_CLASS_MEAN_RANGE[0] <= values.mean() <= PSNR_CLASS_MEAN_RANGE[1], kind
            assert values.min() >= PSNR_HARD_RANGE[0], kind
            assert values.max() <= PSNR_HARD_RANGE[1], kind
            in_band = ((values >= 15.0) & (values <= 30.0)).mean()
            assert in_band >= PSNR_IN_BAND_MIN_FRACTION, (kind, in_band)

    def test_random_specs_respect_stated_ranges(self, rng):
        for _ in range(50):
            haze = DegradationSpec.random(Weather.HAZE, rng)
            assert 0.7 <= haze.airlight <= 1.0
            assert 0.8 <= haze.beta_scatter <= 2.5
            rain = DegradationSpec.random(Weather.RAIN, rng)
            assert 70.0 <= rain.angle_deg <= 110.0
            snow = DegradationSpec.random(Weather.SNOW, rng)
            assert 1.0 <= snow.particle_radius <= 4.0
            assert 0.6 <= snow.particle_opacity <= 1.0


class TestDataset:
    def test_counts_and_balance(self, tmp_path):
        man = make_dataset(tmp_path / "ds", per_class=10, size=32, seed=0)
        assert len(man.records) == 30
        for split in ("train", "test"):
            recs = man.split(split)
            counts = [sum(1 for r in recs if r["label"] == k) for k in range(3)]
            assert max(counts) - min(counts) <= 1

    def test_manifest_byte_identical_across_runs(self, tmp_path):
        make_dataset(tmp_path / "a", per_class=4, size=32, seed=9)
        make_dataset(tmp_path / "b", per_class=4, size=32, seed=9)
        a = (tmp_path / "a" / "manifest").read_bytes()
        b = (tmp_path / "b" / "manifest").read_bytes()
        assert a == b

    def test_png_roundtrip_residual_invariant(self, tmp_path):
        man = make_dataset(tmp_path / "ds", per_class=3, size=32, seed=1)
        for rec in man.records:
            clean, degraded, label = man.load_pair(rec)
            spec = DegradationSpec.from_dict(rec["spec"])
            regen = degrade(synth_clean(SceneSpec(32, rec["scene_seed"])), spec)
            # quantization-only error after the 8-bit round trip
            assert np.max(np.abs(degraded - regen)) <= 2.0 / 255.0
            assert label == spec.kind

    def test_reload_validates_files(self, tmp_path):
        man = make_dataset(tmp_path / "ds", per_class=2, size=32, seed=2)
        (tmp_path / "ds" / man.records[0]["clean"]).unlink()
        with pytest.raises(FileNotFoundError):
            DatasetManifest.load(tmp_path / "ds")

    def test_spec_dict_roundtrip(self, rng):
        for kind in Weather:
            spec = DegradationSpec.random(kind, rng)
            again = DegradationSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
            assert again == spec

    def test_save_load_image_quantization(self, tmp_path, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        save_image(tmp_path / "x.png", img)
        back = load_image(tmp_path / "x.png")
        assert np.max(np.abs(back - img)) <= 1.0 / 255.0


class TestBenchmarkHardness:
    def test_trivial_pixel_classifier_below_90(self, train_pairs, test_pairs):
        """Mean brightness + edge histogram must not crack the benchmark."""

        def features(img):
            gray = img.mean(-1)
            gx = np.abs(np.diff(gray, axis=1)).ravel()
            gy = np.abs(np.diff(gray, axis=0)).ravel()
            hist, _ = np.histogram(np.concatenate([gx, gy]), bins=8, range=(0, 0.8), density=True)
            return np.concatenate([[gray.mean()], hist])

        ftr = np.stack([features(i) for i, _ in train_pairs])
        ytr = np.array([l for _, l in train_pairs])
        fte = np.stack([features(i) for i, _ in test_pairs])
        yte = np.array([l for _, l in test_pairs])
        mu, sd = ftr.mean(0), ftr.std(0) + 1e-9
        ftr, fte = (ftr - mu) / sd, (fte - mu) / sd
        centroids = np.stack([ftr[ytr == k].mean(0) for k in range(3)])
        pred = np.argmin(((fte[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        assert (pred == yte).mean() < 0.90
