import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonetrack.features import FeatureMatrix
from phonetrack.matchmismatch import (
    AccuracyRow,
    ExampleSet,
    SegmentationConfig,
    accuracy_from_probs,
    build_recording_examples,
    check_no_leakage,
    count_examples,
    evaluate_accuracy,
    extract_examples,
    finetune,
    predict_probabilities,
    train_subject_independent,
    write_accuracy_csv,
    write_example_manifest,
)
from phonetrack.nn import DualPathModel, ModelConfig, TrainConfig, init_params
from phonetrack.nn.train import mean_loss
from phonetrack.signals import TimeSeries, split_boundaries

FS = 64


def recording(seconds, n_channels=4, dims=2, seed=0, fs=FS):
    rng = np.random.default_rng(seed)
    n = int(round(seconds * fs))
    eeg = TimeSeries(rng.normal(size=(n, n_channels)), fs)
    speech = FeatureMatrix((rng.random((n, dims)) < 0.2).astype(float), fs, tuple(f"d{i}" for i in range(dims)), "VC")
    return eeg, speech


def brute_force_starts(n, window, hop, gap):
    """Every start k*hop (rounded to a sample) whose mismatch segment still fits, scanning all k."""
    from fractions import Fraction
    hop = Fraction(hop).limit_denominator(1000)
    starts = []
    for k in range(n + 1):
        exact = k * hop
        if exact + 2 * window + gap > n:
            break
        starts.append(int(exact + Fraction(1, 2)) if exact.denominator != 1 else int(exact))
    return starts


class TestExtract:
    def test_15s(self):
        eeg, speech = recording(15)
        ex = extract_examples(eeg, speech)
        assert [e.start / FS for e in ex] == [0, 1, 2, 3, 4]
        assert [e.mismatch_start / FS for e in ex] == [6, 7, 8, 9, 10]
        assert [e.label for e in ex] == ["A", "B", "A", "B", "A"]

    def test_11s(self):
        eeg, speech = recording(11)
        ex = extract_examples(eeg, speech)
        assert len(ex) == 1 and ex[0].start == 0

    def test_no_overlap(self):
        eeg, speech = recording(40)
        ex = extract_examples(eeg, speech, SegmentationConfig(overlap_fraction=0.0))
        starts = [e.start for e in ex]
        assert np.all(np.diff(starts) == 5 * FS)

    def test_contents(self):
        eeg, speech = recording(15)
        for e in extract_examples(eeg, speech):
            t, tm, W = e.start, e.mismatch_start, 5 * FS
            np.testing.assert_array_equal(e.eeg, eeg.data[t:t + W])
            matched = e.speech_a if e.label == "A" else e.speech_b
            mism = e.speech_b if e.label == "A" else e.speech_a
            np.testing.assert_array_equal(matched, speech.data[t:t + W])
            np.testing.assert_array_equal(mism, speech.data[tm:tm + W])
            assert tm == t + W + FS

    def test_coincident_flag(self):
        eeg, _ = recording(15)
        flat = FeatureMatrix(np.zeros((eeg.n_samples, 1)), FS, ("vad",), "VAD")
        assert all(e.coincident for e in extract_examples(eeg, flat))

    def test_too_short(self):
        eeg, speech = recording(10.9)
        with pytest.raises(ValueError):
            extract_examples(eeg, speech)

    def test_mismatched_inputs(self):
        eeg, speech = recording(15)
        with pytest.raises(ValueError):
            extract_examples(eeg.slice(0, 900), speech)

    @pytest.mark.parametrize("bad", [dict(window_s=0), dict(overlap_fraction=1.0), dict(mismatch_gap_s=-1)])
    def test_config_rejects(self, bad):
        with pytest.raises(ValueError):
            SegmentationConfig(**bad)


@pytest.mark.parametrize("seed", range(50))
def test_count_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 64 * 120))
    cfg = SegmentationConfig(window_s=float(rng.choice([1, 2, 5, 10])), overlap_fraction=float(rng.choice([0, 0.5, 0.8])))
    window, hop, gap = cfg.samples(FS)
    brute = brute_force_starts(n, window, hop, gap)
    assert count_examples(n, FS, cfg) == len(brute)
    closed = max(0, int(np.floor((n / FS - 2 * cfg.window_s - cfg.mismatch_gap_s) / ((1 - cfg.overlap_fraction) * cfg.window_s) + 1e-9)) + 1)
    assert count_examples(n, FS, cfg) == closed
    if brute:
        eeg, speech = recording(n / FS, seed=seed)
        assert [e.start for e in extract_examples(eeg, speech, cfg)] == brute


class TestRecordingSplit:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(64 * 60, 64 * 400), st.integers(0, 1000))
    def test_no_leakage_and_balance(self, n, seed):
        eeg, speech = recording(n / FS, seed=seed)
        sets = build_recording_examples(eeg, speech, recording_id="r")
        b = split_boundaries(n)
        for split, es in sets.items():
            check_no_leakage(es, b, 5 * FS)
            labels = es.labels
            assert abs(int(labels.sum()) - int((1 - labels).sum())) <= 1
            assert all(row["split"] == split for row in es.provenance())

    def test_leak_is_detected(self):
        eeg, speech = recording(300)
        sets = build_recording_examples(eeg, speech, recording_id="r")
        es = sets["validation"]
        es.start[0] -= 64  # pretend the window began inside the training head
        with pytest.raises(AssertionError):
            check_no_leakage(es, split_boundaries(eeg.n_samples), 5 * FS)

    def test_train_normalization(self):
        eeg, speech = recording(300)
        eeg = eeg.with_data(eeg.data * 7 + 3)
        sets = build_recording_examples(eeg, speech, recording_id="r")
        b = split_boundaries(eeg.n_samples)
        train_raw = np.concatenate([eeg.data[b[0]:b[1]], eeg.data[b[3]:b[4]]])
        eeg_batch = sets["test"].batch([0])[0][0]
        t0 = sets["test"].provenance()[0]["start"]
        expected = (eeg.data[t0:t0 + 320] - train_raw.mean(0)) / train_raw.std(0)
        np.testing.assert_allclose(eeg_batch, expected, rtol=1e-5, atol=1e-5)

    def test_example_set_matches_extract(self):
        eeg, speech = recording(30)
        es = ExampleSet(320)
        es.add_segment(eeg.data, speech.data, "r", 0, "test", FS, SegmentationConfig())
        ref = extract_examples(eeg, speech, recording_id="r", split="test")
        assert len(es) == len(ref)
        for got, want in zip(es, ref):
            assert got.label == want.label and got.start == want.start
            np.testing.assert_allclose(got.speech_a, want.speech_a)
            np.testing.assert_allclose(got.eeg, want.eeg, rtol=1e-6)

    def test_manifest(self, tmp_path):
        eeg, speech = recording(300)
        sets = build_recording_examples(eeg, speech, recording_id="sub-000")
        write_example_manifest(sets, FS, tmp_path / "ex.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "ex.jsonl").read_text().splitlines()]
        assert len(rows) == sum(len(s) for s in sets.values())
        assert {"recording_id", "t_start", "label", "split"} <= set(rows[0])


class TestAccuracy:
    def test_oracle(self):
        labels = np.array([1, 0, 1, 0, 0])
        assert accuracy_from_probs(np.where(labels == 1, 0.9, 0.1), labels) == 1.0

    def test_constant_half_is_chance(self):
        labels = np.array([1, 0] * 10)
        assert accuracy_from_probs(np.full(20, 0.5), labels) == 0.5

    def test_hand_scored(self):
        p = np.array([0.9, 0.2, 0.5, 0.51, 0.49, 0.7, 0.3, 0.5, 0.99, 0.01])
        y = np.array([1, 0, 1, 1, 1, 0, 0, 0, 1, 1])
        # correct: 1,2,(tie->B wrong),4,(wrong),(wrong),7,(tie->B right),9,(wrong) -> 6
        assert accuracy_from_probs(p, y) == 0.6

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy_from_probs(np.zeros(0), np.zeros(0))

    def test_slot_swap_consistency(self):
        cfg = ModelConfig(eeg_channels=4, feature_dims=2, eeg_filters=8, speech_filters=8, lstm_units=6, head_hidden=8)
        p = init_params(cfg, 0)
        p["head_v"][...] = np.random.default_rng(1).uniform(-1, 1, 8)
        eeg, speech = recording(60)
        es = ExampleSet(320)
        es.add_segment(eeg.data, speech.data, "r", 0, "test", FS, SegmentationConfig())
        e, sa, sb, y = es.batch(np.arange(len(es)))
        prob = DualPathModel(cfg).forward(p, e, sa, sb)
        swapped = DualPathModel(cfg).forward(p, e, sb, sa)
        assert not np.any(prob == 0.5)
        assert accuracy_from_probs(prob, y) == accuracy_from_probs(swapped, 1 - y)
        assert evaluate_accuracy(p, es) == accuracy_from_probs(prob, y)
        np.testing.assert_allclose(predict_probabilities(p, es, batch_size=7), prob, atol=1e-7)


SMALL = ModelConfig(eeg_channels=4, feature_dims=2, eeg_filters=6, speech_filters=6, lstm_units=4, head_hidden=6,
                    window_samples=64, time_kernel=9, time_stride=3)
SMALL_SEG = SegmentationConfig(window_s=1.0, overlap_fraction=0.5, mismatch_gap_s=0.25)


def small_corpus(n_subjects=2, seconds=60):
    out = {}
    for s in range(n_subjects):
        eeg, speech = recording(seconds, seed=s)
        out[f"sub-{s:03d}"] = build_recording_examples(eeg, speech, SMALL_SEG, recording_id=f"sub-{s:03d}")
    return out


class TestProtocol:
    def test_zero_epochs_returns_init(self):
        corpus = small_corpus()
        init = init_params(SMALL, 4)
        res = train_subject_independent(corpus, SMALL, TrainConfig(max_epochs=0), init=init)
        assert res.params.flat.tobytes() == init.flat.tobytes()

    def test_si_training_runs_and_is_reproducible(self):
        corpus = small_corpus()
        cfg = TrainConfig(max_epochs=3, patience=2, batch_size=16, seed=1)
        a = train_subject_independent(corpus, SMALL, cfg)
        b = train_subject_independent(corpus, SMALL, cfg)
        assert a.history == b.history and a.params.flat.tobytes() == b.params.flat.tobytes()
        assert 1 <= a.best_epoch <= 3

    def test_empty_training_set(self):
        corpus = small_corpus()
        for v in corpus.values():
            v["train"] = ExampleSet(64)
        with pytest.raises(ValueError):
            train_subject_independent(corpus, SMALL, TrainConfig(max_epochs=1, patience=1))

    def test_finetune_lr_zero_unchanged(self):
        corpus = small_corpus(1)
        p = init_params(SMALL, 2)
        res = finetune(p, corpus["sub-000"], TrainConfig(max_epochs=2, patience=1, learning_rate=0.0))
        assert res.params.flat.tobytes() == p.flat.tobytes()

    def test_finetune_never_raises_validation_loss(self):
        corpus = small_corpus(1)
        p = init_params(SMALL, 2)
        p["head_v"][...] = np.random.default_rng(0).uniform(-1, 1, SMALL.head_hidden)
        sub = corpus["sub-000"]
        before = mean_loss(DualPathModel(SMALL), p, sub["validation"], 64)
        res = finetune(p, sub, TrainConfig(max_epochs=3, patience=1, learning_rate=0.05, batch_size=8))
        assert res.best_val_loss <= before
        assert mean_loss(DualPathModel(SMALL), res.params, sub["validation"], 64) == pytest.approx(res.best_val_loss)


def test_accuracy_csv(tmp_path):
    write_accuracy_csv([AccuracyRow("sub-000", "VC", "SI", 5.0, 0.9, 100)], tmp_path / "acc.csv")
    assert (tmp_path / "acc.csv").read_text().splitlines() == [
        "subject,scheme,model_stage,window_s,accuracy,n_examples", "sub-000,VC,SI,5.0,0.9,100"]
