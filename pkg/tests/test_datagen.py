import numpy as np
import pytest

from chestsep import datagen, dsp
from chestsep.datagen import (
    DatasetManifest,
    DatasetParams,
    SampleRecord,
    SourceSpec,
    TrainingStream,
    build_test_manifest,
    build_validation_manifest,
    mix,
    mix64,
    random_crop,
    random_unit_fir,
    render_sample,
    synth_source,
)
from chestsep.dsp import Waveform
from chestsep.errors import ConfigError, ShapeMismatch


def autocorr_peak_lag(x, lo, hi):
    centered = x - x.mean()
    ac = np.correlate(centered, centered, mode="full")[len(x) - 1 :]
    return lo + int(np.argmax(ac[lo:hi]))


class TestSourceGenerators:
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_heart_cycle_in_autocorrelation(self, seed):
        bpm = 144.0
        wave = synth_source(SourceSpec("heart", seed, seed * 11, heart_bpm=bpm))
        expected = 60.0 / bpm * datagen.SAMPLE_RATE
        lag = autocorr_peak_lag(wave.samples, 1000, 3600)
        assert abs(lag - expected) / expected < 0.02

    def test_lung_band_energy(self):
        wave = synth_source(SourceSpec("lung", 1, 7, breath_rate_bpm=48.0))
        spectrum = np.abs(np.fft.rfft(wave.samples)) ** 2
        freqs = np.fft.rfftfreq(len(wave), 1.0 / datagen.SAMPLE_RATE)
        in_band = spectrum[(freqs >= 200) & (freqs <= 1000)].sum()
        assert in_band / spectrum.sum() >= 0.90

    def test_heart_band_energy(self):
        wave = synth_source(SourceSpec("heart", 1, 7))
        spectrum = np.abs(np.fft.rfft(wave.samples)) ** 2
        freqs = np.fft.rfftfreq(len(wave), 1.0 / datagen.SAMPLE_RATE)
        in_band = spectrum[(freqs >= 50) & (freqs <= 250)].sum()
        assert in_band / spectrum.sum() >= 0.90

    def test_cry_above_highpass_cutoff(self):
        wave = synth_source(SourceSpec("cry", 2, 5))
        spectrum = np.abs(np.fft.rfft(wave.samples)) ** 2
        freqs = np.fft.rfftfreq(len(wave), 1.0 / datagen.SAMPLE_RATE)
        assert spectrum[freqs >= 300].sum() / spectrum.sum() >= 0.95

    @pytest.mark.parametrize("kind", datagen.SOURCE_KINDS)
    def test_deterministic_and_finite(self, kind):
        spec = SourceSpec(kind, 3, 1234)
        a = synth_source(spec)
        b = synth_source(spec)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert len(a) == 40000
        assert np.all(np.isfinite(a.samples))
        assert np.any(a.samples)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            SourceSpec("humpback_whale", 0, 0)

    def test_disconnect_interval_consistent_and_long_enough(self):
        spec = SourceSpec("steth_disconnect", 4, 99)
        i0, i1 = datagen.disconnect_interval(spec)
        assert (i1 - i0) >= datagen.SAMPLE_RATE  # at least 1 s
        wave = synth_source(spec)
        inside = dsp.signal_power(wave.samples[i0:i1])
        outside = np.concatenate([wave.samples[:i0], wave.samples[i1:]])
        assert inside > 100 * dsp.signal_power(outside)


class TestRandomUnitFir:
    def test_unit_norm(self, rng):
        for _ in range(50):
            coeffs = random_unit_fir(rng)
            assert abs(float(coeffs @ coeffs) - 1.0) < 1e-9

    def test_lengths_in_range(self, rng):
        lengths = {len(random_unit_fir(rng, (3, 5))) for _ in range(200)}
        assert lengths == {3, 4, 5}
        assert {len(random_unit_fir(rng, (3, 3))) for _ in range(20)} == {3}

    def test_seeded_reproducible(self):
        a = random_unit_fir(np.random.default_rng(5))
        b = random_unit_fir(np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


def _unit_sources(seed, n=4000):
    rng = np.random.default_rng(seed)
    mk = lambda: Waveform(rng.standard_normal(n))
    return mk(), mk(), mk()


class TestMix:
    def test_zero_noise_additive_exact(self):
        heart, lung, _ = _unit_sources(0)
        sample = mix(heart, lung, None, 0.0, 0.0, "additive")
        np.testing.assert_allclose(
            sample.mixture.samples,
            sample.target_heart.samples + sample.target_lung.samples,
            atol=1e-12,
        )
        np.testing.assert_array_equal(sample.noise.samples, 0.0)

    def test_equal_power_mixture_power_near_three(self):
        powers = []
        for seed in range(100):
            heart, lung, noise = _unit_sources(seed)
            sample = mix(heart, lung, noise, 0.0, 0.0, "additive")
            powers.append(dsp.signal_power(sample.mixture.samples))
        assert abs(np.mean(powers) / 3.0 - 1.0) < 0.10

    def test_identity_fir_equals_additive(self):
        heart, lung, noise = _unit_sources(3)
        identity = [np.array([1.0, 0.0, 0.0])] * 3
        conv = mix(heart, lung, noise, -5.0, 5.0, "convolutive", firs=identity)
        add = mix(heart, lung, noise, -5.0, 5.0, "additive")
        np.testing.assert_allclose(conv.mixture.samples, add.mixture.samples, atol=1e-12)

    def test_power_calibration_additive(self):
        for rel_db in (-10.0, -5.0, 0.0, 5.0, 10.0):
            heart, lung, _ = _unit_sources(7)
            sample = mix(heart, lung, None, rel_db, 0.0, "additive")
            measured = 10.0 * np.log10(
                dsp.signal_power(sample.target_lung.samples)
                / dsp.signal_power(sample.target_heart.samples)
            )
            assert abs(measured - rel_db) < 0.1

    def test_length_mismatch_rejected(self):
        heart, lung, _ = _unit_sources(1)
        with pytest.raises(ShapeMismatch):
            mix(heart, Waveform(lung.samples[:-5]), None, 0.0, 0.0, "additive")

    def test_firs_exactly_when_convolutive(self):
        heart, lung, noise = _unit_sources(2)
        with pytest.raises(ConfigError):
            mix(heart, lung, noise, 0.0, 0.0, "convolutive")
        with pytest.raises(ConfigError):
            mix(heart, lung, noise, 0.0, 0.0, "additive", firs=[np.ones(3)] * 3)

    def test_disconnect_zeroing_exact(self):
        record = SampleRecord(0, "test", 11, "steth_disconnect", "additive",
                              0.0, 5.0, 424242, 150.0, 50.0, 0)
        sample = render_sample(record)
        spec = SourceSpec("steth_disconnect", 11, mix64(record.seed, 3))
        i0, i1 = datagen.disconnect_interval(spec)
        assert np.all(sample.target_heart.samples[i0:i1] == 0.0)
        assert np.all(sample.target_lung.samples[i0:i1] == 0.0)
        np.testing.assert_allclose(
            sample.mixture.samples[i0:i1], sample.noise.samples[i0:i1], atol=1e-12
        )


class TestAdditiveConsistency:
    @pytest.mark.parametrize("mode", ["additive", "convolutive"])
    def test_mixture_minus_targets_is_noise(self, mode):
        record = SampleRecord(0, "test", 10, "cry", mode, -5.0, 3.0, 777,
                              140.0, 55.0, 3 if mode == "convolutive" else 0)
        sample = render_sample(record)
        residual = (
            sample.mixture.samples
            - sample.target_heart.samples
            - sample.target_lung.samples
            - sample.noise.samples
        )
        assert np.max(np.abs(residual)) < 1e-6


class TestRandomCrop:
    def _sample(self):
        return render_sample(SampleRecord(0, "train", 1, "cry", "additive",
                                          0.0, -10.0, 31337, 130.0, 45.0, 0))

    def test_offset_zero_takes_prefix(self):
        sample = self._sample()
        cropped = random_crop(sample, 8.0, rng=None)
        np.testing.assert_array_equal(cropped.mixture.samples, sample.mixture.samples[:32000])

    def test_channels_stay_aligned(self):
        sample = self._sample()
        cropped = random_crop(sample, 8.0, np.random.default_rng(4))
        residual = (
            cropped.mixture.samples
            - cropped.target_heart.samples
            - cropped.target_lung.samples
            - cropped.noise.samples
        )
        assert np.max(np.abs(residual)) < 1e-9
        assert cropped.length == 32000

    def test_crop_longer_than_sample_rejected(self):
        with pytest.raises(ShapeMismatch):
            random_crop(self._sample(), 11.0, np.random.default_rng(0))

    def test_offsets_uniform_over_range(self):
        rng = np.random.default_rng(8)
        n_draws, n_bins = 10_000, 8
        offsets = rng.integers(0, 8001, size=n_draws)  # same distribution as random_crop
        counts, _ = np.histogram(offsets, bins=n_bins, range=(0, 8001))
        expected = n_draws / n_bins
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 24.32  # chi-square 0.999 quantile, 7 dof


class TestManifests:
    def test_test_grid_combinatorics(self):
        params = DatasetParams(seed=5)
        manifest = build_test_manifest(params)
        subjects = len(params.pool("test"))
        grid = len(params.db_grid)
        modes = len(params.modes)
        expected = (
            subjects * modes * grid
            + subjects * len(datagen.GENERAL_NOISE_KINDS) * modes * grid * grid
            + subjects * len(datagen.RESP_NOISE_KINDS) * modes * grid * grid
        )
        assert len(manifest) == expected
        assert [r.sample_index for r in manifest.rows] == list(range(expected))

    def test_test_fir_length_fixed_at_three(self):
        manifest = build_test_manifest(DatasetParams(seed=5))
        for row in manifest.rows:
            if row.mode == "convolutive":
                assert row.fir_len == 3

    def test_partition_subject_disjointness(self):
        manifest = build_test_manifest(DatasetParams(seed=1))
        manifest.rows += build_validation_manifest(DatasetParams(seed=1)).rows
        manifest.assert_no_leakage()
        with pytest.raises(ConfigError):
            DatasetParams(subjects={"train": (0, 1), "val": (1, 2), "test": (3,)}).validate()

    def test_manifest_file_roundtrip(self, tmp_path):
        manifest = build_test_manifest(DatasetParams(seed=9))
        path = tmp_path / "m.txt"
        manifest.save(path)
        loaded = DatasetManifest.load(path)
        assert loaded.rows == manifest.rows

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("sample_index=0 partition=test oops\n")
        with pytest.raises(ConfigError):
            DatasetManifest.load(path)

    def test_regeneration_bitwise_identical(self):
        manifest = build_test_manifest(DatasetParams(seed=5))
        row = manifest.rows[123]
        a = render_sample(row)
        b = render_sample(row)
        np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
        np.testing.assert_array_equal(a.target_heart.samples, b.target_heart.samples)


class TestTrainingStream:
    def test_no_stethoscope_kinds(self):
        stream = TrainingStream(seed=2)
        kinds = {stream.record_for(0, step, item).noise_kind
                 for step in range(40) for item in range(4)}
        assert kinds <= set(("cry", "cpap_bubble", "cpap_vent"))

    def test_with_stethoscope_flag(self):
        stream = TrainingStream(seed=2, include_stethoscope=True)
        kinds = {stream.record_for(0, step, 0).noise_kind for step in range(200)}
        assert "steth_rub" in kinds or "steth_disconnect" in kinds

    def test_crops_are_8_seconds(self):
        stream = TrainingStream(seed=3)
        mixtures, targets = stream.batch(0, 0, 2, (-20.0, 0.0))
        assert mixtures.shape == (2, 32000)
        assert targets.shape == (2, 2, 32000)

    def test_no_crop_keeps_full_length(self):
        stream = TrainingStream(seed=3, crop_s=None)
        mixtures, _ = stream.batch(0, 0, 1, (-20.0, 0.0))
        assert mixtures.shape == (1, 40000)

    def test_noise_db_range_respected(self):
        stream = TrainingStream(seed=4)
        for step in range(30):
            record = stream.record_for(0, step, 0, noise_db_range=(-20.0, 0.0))
            assert -20.0 <= record.rel_db_noise <= 0.0
            record = stream.record_for(1, step, 0, noise_db_range=(-10.0, 10.0))
            assert -10.0 <= record.rel_db_noise <= 10.0

    def test_batches_reproducible(self):
        a = TrainingStream(seed=5).batch(2, 7, 2, (-20.0, 0.0))
        b = TrainingStream(seed=5).batch(2, 7, 2, (-20.0, 0.0))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_train_subjects_only(self):
        params = DatasetParams(seed=0)
        stream = TrainingStream(seed=6, params=params)
        pool = set(params.pool("train"))
        for step in range(50):
            assert stream.record_for(0, step, 0).subject_id in pool
