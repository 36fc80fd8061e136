"""Matched/mismatched example construction and the train / fine-tune / evaluate protocol.

For a decision window starting at sample ``t`` the matched speech is
``[t, t + W)`` and the mismatched speech is taken from the same recording
``gap`` seconds after the EEG window ends: ``[t + W + gap, t + 2W + gap)``.
Windows whose mismatch segment would run past the end are dropped. The
matched slot alternates A, B, A, ... in emission order.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import FeatureMatrix
from .nn.model import DualPathModel, ModelConfig, ModelParams, init_params
from .nn.train import TrainConfig, TrainResult, train_loop
from .signals import TimeSeries, apply_normalization, fit_normalization, split_boundaries

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class SegmentationConfig:
    window_s: float = 5.0
    overlap_fraction: float = 0.8
    mismatch_gap_s: float = 1.0

    def __post_init__(self):
        if not self.window_s > 0:
            raise ValueError("window_s must be > 0")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.mismatch_gap_s < 0:
            raise ValueError("mismatch_gap_s must be >= 0")

    def samples(self, fs: float) -> tuple[int, float, int]:
        """(window, hop, gap) in samples. The hop stays fractional; starts are rounded one by one."""
        window = int(round(self.window_s * fs))
        hop = (1 - self.overlap_fraction) * self.window_s * fs
        gap = int(round(self.mismatch_gap_s * fs))
        if window < 1 or hop < 1:
            raise ValueError(f"window ({window}) and hop ({hop:g}) must be at least one sample at {fs} Hz")
        return window, hop, gap


def count_examples(n_samples: int, fs: float, cfg: SegmentationConfig) -> int:
    """Closed-form number of windows: ``max(0, floor((N - 2W - gap) / hop) + 1)``."""
    window, hop, gap = cfg.samples(fs)
    span = n_samples - 2 * window - gap
    if span < 0:
        return 0
    return int(np.floor(span / hop + 1e-9)) + 1


@dataclass(frozen=True)
class MatchMismatchExample:
    eeg: np.ndarray
    speech_a: np.ndarray
    speech_b: np.ndarray
    label: str  # "A" or "B": the matched slot
    recording_id: str
    start: int
    mismatch_start: int
    split: str = ""
    coincident: bool = False  # both candidates hold identical speech


def window_starts(n_samples: int, fs: float, cfg: SegmentationConfig) -> list[tuple[int, int]]:
    """(matched start, mismatched start) pairs in emission order."""
    window, hop, gap = cfg.samples(fs)
    starts = (int(np.floor(0.5 + k * hop)) for k in range(count_examples(n_samples, fs, cfg)))
    return [(t, t + window + gap) for t in starts]


def extract_examples(
    eeg: TimeSeries,
    speech: FeatureMatrix,
    cfg: SegmentationConfig = SegmentationConfig(),
    *,
    recording_id: str = "",
    split: str = "",
    offset: int = 0,
    first_index: int = 0,
) -> list[MatchMismatchExample]:
    """All examples of one contiguous segment.

    ``offset`` is added to the recorded start samples (for provenance within
    a longer recording); ``first_index`` continues the A/B alternation.
    """
    if eeg.fs != speech.fs or eeg.n_samples != speech.n_samples:
        raise ValueError("EEG and speech must share sampling rate and length")
    window, _, gap = cfg.samples(eeg.fs)
    if eeg.n_samples < 2 * window + gap:
        raise ValueError(f"segment of {eeg.n_samples} samples is shorter than window + gap + window "
                         f"({2 * window + gap})")
    out = []
    for k, (t, tm) in enumerate(window_starts(eeg.n_samples, eeg.fs, cfg)):
        matched = speech.data[t:t + window]
        mismatched = speech.data[tm:tm + window]
        a_is_match = (first_index + k) % 2 == 0
        sa, sb = (matched, mismatched) if a_is_match else (mismatched, matched)
        out.append(MatchMismatchExample(
            eeg=eeg.data[t:t + window], speech_a=sa, speech_b=sb,
            label="A" if a_is_match else "B", recording_id=recording_id,
            start=offset + t, mismatch_start=offset + tm, split=split,
            coincident=bool(np.array_equal(matched, mismatched)),
        ))
    return out


class ExampleSet:
    """Examples stored as indices into per-recording arrays; batches are gathered on demand."""

    def __init__(self, window: int, dtype=np.float32):
        self.window = window
        self.dtype = dtype
        self.recordings: list[tuple[np.ndarray, np.ndarray]] = []
        self.recording_ids: list[str] = []
        self.offsets: list[int] = []
        self.rec: list[int] = []
        self.start: list[int] = []
        self.mismatch: list[int] = []
        self.label_a: list[int] = []
        self.split: list[str] = []

    def __len__(self) -> int:
        return len(self.rec)

    def add_segment(self, eeg: np.ndarray, speech: np.ndarray, recording_id: str, offset: int,
                    split: str, fs: float, cfg: SegmentationConfig, first_index: int = 0) -> int:
        """Add all windows of one segment; returns how many were added."""
        pairs = window_starts(eeg.shape[0], fs, cfg)
        if not pairs:
            return 0
        r = len(self.recordings)
        self.recordings.append((np.asarray(eeg, dtype=self.dtype), np.asarray(speech, dtype=self.dtype)))
        self.recording_ids.append(recording_id)
        self.offsets.append(offset)
        for k, (t, tm) in enumerate(pairs):
            self.rec.append(r)
            self.start.append(t)
            self.mismatch.append(tm)
            self.label_a.append(int((first_index + k) % 2 == 0))
            self.split.append(split)
        return len(pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self.label_a)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        W = self.window
        eeg = np.stack([self.recordings[self.rec[i]][0][self.start[i]:self.start[i] + W] for i in idx])
        matched = np.stack([self.recordings[self.rec[i]][1][self.start[i]:self.start[i] + W] for i in idx])
        mism = np.stack([self.recordings[self.rec[i]][1][self.mismatch[i]:self.mismatch[i] + W] for i in idx])
        y = self.labels[idx]
        a_first = (y == 1)[:, None, None]
        return eeg, np.where(a_first, matched, mism), np.where(a_first, mism, matched), y

    def example(self, i: int) -> MatchMismatchExample:
        eeg, sa, sb, y = self.batch([i])
        r = self.rec[i]
        return MatchMismatchExample(eeg[0], sa[0], sb[0], "A" if y[0] else "B", self.recording_ids[r],
                                    self.offsets[r] + self.start[i], self.offsets[r] + self.mismatch[i],
                                    self.split[i], bool(np.array_equal(sa[0], sb[0])))

    def __iter__(self):
        return (self.example(i) for i in range(len(self)))

    def provenance(self) -> list[dict]:
        """One manifest row per example, with absolute sample positions."""
        rows = []
        for i in range(len(self)):
            r = self.rec[i]
            rows.append({"recording_id": self.recording_ids[r], "start": self.offsets[r] + self.start[i],
                         "mismatch_start": self.offsets[r] + self.mismatch[i],
                         "label": "A" if self.label_a[i] else "B", "split": self.split[i]})
        return rows

    @classmethod
    def concat(cls, sets: Sequence["ExampleSet"]) -> "ExampleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        out = cls(sets[0].window, sets[0].dtype)
        for s in sets:
            base = len(out.recordings)
            out.recordings += s.recordings
            out.recording_ids += s.recording_ids
            out.offsets += s.offsets
            out.rec += [base + r for r in s.rec]
            out.start += s.start
            out.mismatch += s.mismatch
            out.label_a += s.label_a
            out.split += s.split
        return out


def build_recording_examples(
    eeg: TimeSeries,
    speech: FeatureMatrix,
    cfg: SegmentationConfig = SegmentationConfig(),
    *,
    recording_id: str = "",
    normalize: bool = True,
    dtype=np.float32,
) -> dict[str, ExampleSet]:
    """Split a recording 40/10/10/40 and segment each partition on its own.

    EEG is normalized with statistics of the two training pieces. Partitions
    too short to hold a single example contribute nothing.
    """
    if eeg.fs != speech.fs or eeg.n_samples != speech.n_samples:
        raise ValueError("EEG and speech must share sampling rate and length")
    b = split_boundaries(eeg.n_samples)
    window, _, _ = cfg.samples(eeg.fs)
    if normalize:
        stats = fit_normalization([eeg.slice(b[0], b[1]), eeg.slice(b[3], b[4])])
        eeg = apply_normalization(eeg, stats)
    pieces = {"train": [(b[0], b[1]), (b[3], b[4])], "validation": [(b[1], b[2])], "test": [(b[2], b[3])]}
    out = {}
    for split, ranges in pieces.items():
        es = ExampleSet(window, dtype)
        emitted = 0
        for lo, hi in ranges:
            emitted += es.add_segment(eeg.data[lo:hi], speech.data[lo:hi], recording_id, lo, split,
                                      eeg.fs, cfg, first_index=emitted)
        if emitted == 0:
            logger.warning("%s: %s partition too short for a %.1f s window", recording_id, split, cfg.window_s)
        out[split] = es
    return out


def check_no_leakage(examples: ExampleSet, boundaries: Sequence[int], window: int) -> None:
    """Raise if any example (mismatch segment included) crosses its split partition."""
    b = boundaries
    ranges = {"train": [(b[0], b[1]), (b[3], b[4])], "validation": [(b[1], b[2])], "test": [(b[2], b[3])]}
    for row in examples.provenance():
        lo_ex, hi_ex = row["start"], row["mismatch_start"] + window
        if not any(lo <= lo_ex and hi_ex <= hi for lo, hi in ranges[row["split"]]):
            raise AssertionError(f"example {row} leaves its {row['split']} partition")


# -- training protocol ---------------------------------------------------------------

def _merge(examples_by_subject: Mapping[str, Mapping[str, ExampleSet]], split: str) -> ExampleSet:
    sets = [v[split] for v in examples_by_subject.values() if len(v[split])]
    if not sets:
        raise ValueError(f"no {split} examples")
    return ExampleSet.concat(sets)


def train_subject_independent(
    examples_by_subject: Mapping[str, Mapping[str, ExampleSet]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    init: ModelParams | None = None,
) -> TrainResult:
    """Train one model on the pooled training windows of every subject."""
    model = DualPathModel(model_cfg)
    params = init if init is not None else init_params(model_cfg, train_cfg.seed)
    return train_loop(model, params, _merge(examples_by_subject, "train"),
                      _merge(examples_by_subject, "validation"), train_cfg)


def finetune(params: ModelParams, subject_examples: Mapping[str, ExampleSet], train_cfg: TrainConfig) -> TrainResult:
    """Continue training on one subject; the starting point competes as epoch 0."""
    model = DualPathModel(params.config)
    return train_loop(model, params, subject_examples["train"], subject_examples["validation"], train_cfg,
                      include_initial=True)


def predict_probabilities(params: ModelParams, examples: ExampleSet, batch_size: int = 128) -> np.ndarray:
    model = DualPathModel(params.config)
    out = []
    for start in range(0, len(examples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(examples)))
        eeg, sa, sb, _ = examples.batch(idx)
        out.append(model.forward(params, eeg, sa, sb))
    return np.concatenate(out) if out else np.zeros(0)


def accuracy_from_probs(p_a: np.ndarray, labels_a: np.ndarray) -> float:
    """Predict A iff p(A) > 0.5 (a tie goes to B); fraction correct."""
    p_a = np.asarray(p_a)
    if p_a.size == 0:
        raise ValueError("no examples to score")
    predicted_a = p_a > 0.5
    return float(np.mean(predicted_a == (np.asarray(labels_a) == 1)))


def evaluate_accuracy(params: ModelParams, examples: ExampleSet, batch_size: int = 128) -> float:
    return accuracy_from_probs(predict_probabilities(params, examples, batch_size), examples.labels)


# -- persistence ------------------------------------------------------------------------

def write_example_manifest(sets: Mapping[str, ExampleSet], fs: float, path: str | Path) -> Path:
    """JSON lines: recording id, t_start (s), label, split (plus sample indices)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for es in sets.values():
            for row in es.provenance():
                row = {"recording_id": row["recording_id"], "t_start": row["start"] / fs,
                       "label": row["label"], "split": row["split"], "start_sample": row["start"],
                       "mismatch_start_sample": row["mismatch_start"]}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class AccuracyRow:
    subject: str
    scheme: str
    model_stage: str  # "SI" or "finetuned"
    window_s: float
    accuracy: float
    n_examples: int


def write_accuracy_csv(rows: Iterable[AccuracyRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "scheme", "model_stage", "window_s", "accuracy", "n_examples"])
        for r in rows:
            w.writerow([r.subject, r.scheme, r.model_stage, repr(float(r.window_s)), repr(float(r.accuracy)),
                        r.n_examples])
    return path
