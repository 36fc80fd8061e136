import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phonetrack.signals import (
    TimeSeries,
    apply_normalization,
    common_average_reference,
    fit_normalization,
    highpass_zero_phase,
    invert_normalization,
    load_timeseries,
    preprocess_recording,
    read_binary,
    resample,
    save_timeseries,
    split_recording,
)


def sine(freq, fs, seconds, phase=0.0):
    t = np.arange(int(round(fs * seconds))) / fs
    return np.sin(2 * np.pi * freq * t + phase)


def butter_hp_magnitude_sq(f, cutoff, fs, order):
    # bilinear-transform Butterworth: |H|^2 = 1 / (1 + (tan(pi fc/fs) / tan(pi f/fs))^(2N))
    ratio = np.tan(np.pi * cutoff / fs) / np.tan(np.pi * f / fs)
    return 1.0 / (1.0 + ratio ** (2 * order))


def xcorr_peak_lag(a, b, max_lag=20):
    lags = range(-max_lag, max_lag + 1)
    scores = [np.dot(a[max_lag + k: len(a) - max_lag + k], b[max_lag: len(b) - max_lag]) for k in lags]
    return list(lags)[int(np.argmax(scores))]


class TestTimeSeries:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            TimeSeries(np.array([[1.0], [np.nan]]), 64)

    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError):
            TimeSeries(np.zeros((3, 2)), 64, ("a", "a"))

    def test_default_names(self):
        assert TimeSeries(np.zeros((3, 2)), 64).channel_names == ("ch0", "ch1")


class TestHighpass:
    def test_constant_is_removed(self):
        x = TimeSeries(np.full((64 * 30, 2), 5.0), 64)
        y = highpass_zero_phase(x, 0.5, 4)
        assert np.max(np.abs(y.data[64 * 5:-64 * 5])) < 1e-6

    def test_zeros_stay_zero(self):
        y = highpass_zero_phase(TimeSeries(np.zeros((500, 3)), 64), 0.5, 4)
        assert np.all(y.data == 0)

    def test_10hz_sine_amplitude_and_zero_lag(self):
        fs = 64
        x = sine(10, fs, 60)
        y = highpass_zero_phase(TimeSeries(x, fs), 0.5, 4).data[:, 0]
        steady = y[fs * 10:-fs * 10]
        amplitude = np.sqrt(2 * np.mean(steady ** 2))
        expected = butter_hp_magnitude_sq(10, 0.5, fs, 4)  # two passes square the magnitude
        assert abs(amplitude - 1.0) < 0.01
        assert abs(amplitude - expected) < 0.01
        assert xcorr_peak_lag(y, x) == 0

    @pytest.mark.parametrize("freq", [1.0, 3.0, 7.5, 20.0])
    def test_magnitude_matches_squared_butterworth(self, freq):
        fs = 64
        x = sine(freq, fs, 120)
        y = highpass_zero_phase(TimeSeries(x, fs), 0.5, 4).data[:, 0]
        steady = y[fs * 20:-fs * 20]
        amplitude = np.sqrt(2 * np.mean(steady ** 2))
        assert amplitude == pytest.approx(butter_hp_magnitude_sq(freq, 0.5, fs, 4), rel=1e-2)

    @pytest.mark.parametrize("freq", [2.0, 5.0, 15.0])
    def test_double_application_keeps_zero_phase(self, freq):
        fs = 64
        x = sine(freq, fs, 60)
        once = highpass_zero_phase(TimeSeries(x, fs))
        twice = highpass_zero_phase(once).data[:, 0]
        assert xcorr_peak_lag(twice, x) == 0
        steady = slice(fs * 10, -fs * 10)
        ratio = np.sqrt(np.mean(twice[steady] ** 2) / np.mean(once.data[steady, 0] ** 2))
        assert ratio == pytest.approx(butter_hp_magnitude_sq(freq, 0.5, fs, 4), rel=1e-2)

    def test_cutoff_at_nyquist_rejected(self):
        with pytest.raises(ValueError):
            highpass_zero_phase(TimeSeries(np.zeros(100), 64), 32.0, 4)

    def test_non_finite_rejected(self):
        x = TimeSeries(np.zeros((100, 1)), 64)
        x.data[5, 0] = np.inf
        with pytest.raises(ValueError):
            highpass_zero_phase(x)


class TestResample:
    def test_constant(self):
        y = resample(TimeSeries(np.full((1024 * 4, 1), 3.0), 1024), 64)
        assert y.fs == 64
        assert np.max(np.abs(y.data[8:-8] - 3.0)) < 1e-3

    def test_output_length_rounds_half_up(self):
        assert resample(TimeSeries(np.zeros(1000), 1024), 64).n_samples == 63

    def test_5hz_sine_amplitude(self):
        y = resample(TimeSeries(sine(5, 1024, 20), 1024), 64).data[:, 0]
        ref = sine(5, 64, 20)
        assert y.shape == ref.shape
        core = slice(64, -64)
        amplitude = np.sqrt(2 * np.mean(y[core] ** 2))
        assert abs(amplitude - 1.0) < 0.01
        assert np.max(np.abs(y[core] - ref[core])) < 0.01

    @pytest.mark.parametrize("freq", [32.5, 40.0, 100.0, 400.0])
    def test_content_above_target_nyquist_attenuated_60db(self, freq):
        y = resample(TimeSeries(sine(freq, 1024, 20), 1024), 64).data[64:-64, 0]
        assert np.sqrt(2 * np.mean(y ** 2)) < 1e-3

    def test_bandlimited_matches_analytic_sampling(self):
        rng = np.random.default_rng(3)
        freqs, phases = rng.uniform(0.5, 25, 8), rng.uniform(0, 2 * np.pi, 8)
        hi = sum(sine(f, 1024, 30, ph) for f, ph in zip(freqs, phases))
        lo = sum(sine(f, 64, 30, ph) for f, ph in zip(freqs, phases))
        y = resample(TimeSeries(hi, 1024), 64).data[:, 0]
        assert np.corrcoef(y[64:-64], lo[64:-64])[0, 1] > 0.999

    def test_upsampling(self):
        y = resample(TimeSeries(sine(3, 64, 10), 64), 256)
        assert y.n_samples == 2560
        ref = sine(3, 256, 10)
        assert np.max(np.abs(y.data[256:-256, 0] - ref[256:-256])) < 0.01

    def test_irrational_ratio_rejected(self):
        with pytest.raises(ValueError):
            resample(TimeSeries(np.zeros(100), 1000.0), 1000.0 * np.pi / 3, max_denominator=1000)


class TestCommonAverage:
    def test_two_channels(self):
        y = common_average_reference(TimeSeries(np.array([[1.0, 3.0]]), 64))
        np.testing.assert_array_equal(y.data, [[-1.0, 1.0]])

    def test_single_channel_is_zero(self):
        y = common_average_reference(TimeSeries(np.arange(5.0), 64))
        assert np.all(y.data == 0)

    def test_random_64_channels(self):
        x = np.random.default_rng(0).normal(size=(500, 64)) * 50
        y = common_average_reference(TimeSeries(x, 64))
        assert np.max(np.abs(y.data.mean(axis=1))) <= 1e-12 * np.max(np.abs(x))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 8)),
                  elements=st.floats(-1e3, 1e3)))
    def test_idempotent(self, x):
        once = common_average_reference(TimeSeries(x, 64))
        twice = common_average_reference(once)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-9)


class TestSplit:
    def test_paper_proportions(self):
        s = split_recording(TimeSeries(np.zeros(15000), 64))
        assert s.boundaries == (0, 6000, 7500, 9000, 15000)
        assert (s.train_head.n_samples, s.validation.n_samples, s.test.n_samples, s.train_tail.n_samples) == \
            (6000, 1500, 1500, 6000)

    def test_ten_samples(self):
        s = split_recording(TimeSeries(np.arange(10.0), 64))
        assert [p.n_samples for p in (s.train_head, s.validation, s.test, s.train_tail)] == [4, 1, 1, 4]
        np.testing.assert_array_equal(s.train.data[:, 0], [0, 1, 2, 3, 6, 7, 8, 9])

    def test_9999_samples(self):
        s = split_recording(TimeSeries(np.arange(9999.0), 64))
        lengths = [p.n_samples for p in (s.train_head, s.validation, s.test, s.train_tail)]
        assert lengths == [3999, 999, 999, 4002]
        assert sum(lengths) == 9999
        rebuilt = np.concatenate([s.train_head.data, s.validation.data, s.test.data, s.train_tail.data])
        np.testing.assert_array_equal(rebuilt[:, 0], np.arange(9999.0))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(10, 200_000))
    def test_partition_is_exhaustive(self, n):
        from phonetrack.signals import split_boundaries
        b = split_boundaries(n)
        assert b[0] == 0 and b[-1] == n
        assert all(lo < hi for lo, hi in zip(b, b[1:]))

    def test_too_short(self):
        with pytest.raises(ValueError):
            split_recording(TimeSeries(np.zeros(9), 64))


class TestNormalization:
    def test_two_values(self):
        stats = fit_normalization(TimeSeries(np.array([1.0, 3.0]), 64))
        assert stats.mean[0] == 2 and stats.std[0] == 1
        np.testing.assert_array_equal(apply_normalization(TimeSeries(np.array([1.0, 3.0]), 64), stats).data[:, 0],
                                      [-1, 1])
        assert apply_normalization(TimeSeries(np.array([5.0]), 64), stats).data[0, 0] == 3

    def test_random_train_is_standardized(self):
        x = TimeSeries(np.random.default_rng(1).normal(3, 7, size=(1000, 16)), 64)
        y = apply_normalization(x, fit_normalization(x)).data
        assert np.max(np.abs(y.mean(axis=0))) <= 1e-10
        assert np.max(np.abs(y.std(axis=0) - 1)) <= 1e-10

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            fit_normalization(TimeSeries(np.ones((10, 2)), 64))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 5)), elements=st.floats(-100, 100)))
    def test_inverse_round_trip(self, x):
        ts = TimeSeries(x, 64)
        if np.any(x.std(axis=0) < 1e-3):
            return
        stats = fit_normalization(ts)
        back = invert_normalization(apply_normalization(ts, stats), stats).data
        np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-9 * np.max(np.abs(x)))


def test_binary_round_trip(tmp_path):
    x = TimeSeries(np.random.default_rng(0).normal(size=(50, 3)), 64, ("a", "b", "c"))
    path = save_timeseries(tmp_path / "x.f32", x)
    raw = path.read_bytes()
    assert len(raw) == 50 * 3 * 4
    # sample-major little-endian float32
    assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(x.data[0, 0])
    assert np.frombuffer(raw[4:8], "<f4")[0] == np.float32(x.data[0, 1])
    meta = json.loads((tmp_path / "x.f32.json").read_text())
    assert meta == {"fs": 64.0, "n_channels": 3, "channel_names": ["a", "b", "c"], "n_samples": 50}
    y = load_timeseries(path)
    np.testing.assert_allclose(y.data, x.data.astype(np.float32))
    data, _ = read_binary(path)
    assert data.shape == (50, 3)


def test_preprocess_chain_rereferences_and_resamples():
    rng = np.random.default_rng(0)
    x = TimeSeries(rng.normal(size=(1024 * 10, 4)) + 10.0, 1024)
    y = preprocess_recording(x)
    assert y.fs == 64 and y.n_samples == 640
    assert np.max(np.abs(y.data.mean(axis=1))) < 1e-9
