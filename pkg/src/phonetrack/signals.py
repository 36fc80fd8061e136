"""Sampled multichannel signals and the EEG preprocessing chain.

Everything here is a pure function of its inputs. Arrays are stored
time-major, ``[n_samples, n_channels]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import signal

__all__ = [
    "TimeSeries",
    "RecordingSplit",
    "NormalizationStats",
    "highpass_zero_phase",
    "resample",
    "common_average_reference",
    "split_recording",
    "fit_normalization",
    "apply_normalization",
    "invert_normalization",
    "identity_artifact_removal",
    "preprocess_recording",
    "write_binary",
    "read_binary",
    "read_sidecar",
    "save_timeseries",
    "load_timeseries",
]

SPLIT_PROPORTIONS = (0.4, 0.1, 0.1, 0.4)


@dataclass(frozen=True)
class TimeSeries:
    """Multichannel signal sampled at ``fs`` Hz."""

    data: np.ndarray
    fs: float
    channel_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError(f"data must be [n_samples, n_channels], got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("data contains non-finite values")
        if not (np.isfinite(self.fs) and self.fs > 0):
            raise ValueError(f"fs must be positive, got {self.fs}")
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(data.shape[1]))
        if len(names) != data.shape[1]:
            raise ValueError(f"{len(names)} channel names for {data.shape[1]} channels")
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def with_data(self, data: np.ndarray, fs: float | None = None) -> "TimeSeries":
        return TimeSeries(data, self.fs if fs is None else fs, self.channel_names)

    def slice(self, start: int, stop: int) -> "TimeSeries":
        return TimeSeries(self.data[start:stop], self.fs, self.channel_names)

    def select(self, names: Sequence[str]) -> "TimeSeries":
        idx = [self.channel_names.index(n) for n in names]
        return TimeSeries(self.data[:, idx], self.fs, tuple(names))


@dataclass(frozen=True)
class RecordingSplit:
    """Four contiguous partitions of one recording, in time order."""

    train_head: TimeSeries
    validation: TimeSeries
    test: TimeSeries
    train_tail: TimeSeries
    boundaries: tuple[int, int, int, int, int]

    @property
    def train(self) -> TimeSeries:
        return TimeSeries(
            np.concatenate([self.train_head.data, self.train_tail.data]),
            self.train_head.fs,
            self.train_head.channel_names,
        )

    def partitions(self) -> dict[str, list[TimeSeries]]:
        """Partitions keyed by split name. Training keeps both pieces separate."""
        return {
            "train": [self.train_head, self.train_tail],
            "validation": [self.validation],
            "test": [self.test],
        }


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


def _check_finite(x: TimeSeries):
    # TimeSeries validates on construction, but the array can be mutated in place.
    if not np.all(np.isfinite(x.data)):
        raise ValueError("input contains non-finite values")


def highpass_zero_phase(x: TimeSeries, cutoff_hz: float = 0.5, order: int = 4) -> TimeSeries:
    """Butterworth high-pass applied forward and backward.

    The composite response has zero phase and the squared magnitude of a
    single pass. Edges are padded by odd reflection over ``3 * order``
    samples before filtering.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not 0 < cutoff_hz < x.fs / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {x.fs / 2}) for fs={x.fs}")
    _check_finite(x)
    if x.n_samples == 0:
        return x
    sos = signal.butter(order, cutoff_hz, btype="highpass", fs=x.fs, output="sos")
    padlen = min(3 * order, x.n_samples - 1)
    y = signal.sosfiltfilt(sos, x.data, axis=0, padtype="odd", padlen=padlen)
    return x.with_data(y)


def _rational_ratio(fs: float, target_fs: float, max_denominator: int, tol: float) -> Fraction:
    ratio = Fraction(target_fs / fs).limit_denominator(max_denominator)
    if abs(float(ratio) - target_fs / fs) > tol * target_fs / fs:
        raise ValueError(
            f"resampling ratio {target_fs}/{fs} is not rational within tolerance "
            f"(closest {ratio.numerator}/{ratio.denominator})"
        )
    return ratio


def _antialias_taps(up: int, down: int, stopband_db: float, transition: float) -> np.ndarray:
    # Kaiser-windowed sinc whose stopband begins at the narrower Nyquist band.
    max_rate = max(up, down)
    width = transition / max_rate
    n_taps, beta = signal.kaiserord(stopband_db, width)
    n_taps |= 1
    cutoff = 1.0 / max_rate - width / 2
    # resample_poly applies the factor of `up` itself
    return signal.firwin(n_taps, cutoff, window=("kaiser", beta))


def resample(
    x: TimeSeries,
    target_fs: float,
    *,
    stopband_db: float = 70.0,
    transition: float = 0.1,
    max_denominator: int = 10_000,
    tol: float = 1e-9,
) -> TimeSeries:
    """Polyphase rational resampling with a windowed-sinc anti-alias filter.

    The stopband starts at the lower of the two Nyquist frequencies; the
    transition band occupies the top ``transition`` fraction below it.
    Output length is ``floor(0.5 + n_samples * target_fs / fs)``.
    """
    if not target_fs > 0:
        raise ValueError(f"target_fs must be positive, got {target_fs}")
    _check_finite(x)
    ratio = _rational_ratio(x.fs, target_fs, max_denominator, tol)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(np.floor(0.5 + x.n_samples * up / down))
    if up == down:
        return x.with_data(x.data.copy(), fs=target_fs)
    if x.n_samples == 0:
        return x.with_data(np.zeros((0, x.n_channels)), fs=target_fs)
    taps = _antialias_taps(up, down, stopband_db, transition)
    y = signal.resample_poly(x.data, up, down, axis=0, window=taps, padtype="line")
    return x.with_data(y[:n_out], fs=target_fs)


def common_average_reference(x: TimeSeries) -> TimeSeries:
    """Subtract the across-channel mean from every sample."""
    return x.with_data(x.data - x.data.mean(axis=1, keepdims=True))


def split_boundaries(n_samples: int, proportions: Sequence[float] = SPLIT_PROPORTIONS) -> tuple[int, ...]:
    """Cut points for the train-head / validation / test / train-tail split.

    The first three segments get ``floor(p * n)`` samples, the tail takes
    whatever is left, so the partition is always exhaustive.
    """
    lengths = [int(np.floor(p * n_samples)) for p in proportions[:-1]]
    lengths.append(n_samples - sum(lengths))
    if min(lengths) < 1:
        raise ValueError(f"recording of {n_samples} samples is too short to split into non-empty segments")
    return tuple(int(b) for b in np.concatenate([[0], np.cumsum(lengths)]))


def split_recording(x: TimeSeries) -> RecordingSplit:
    if x.n_samples < 10:
        raise ValueError(f"need at least 10 samples to split, got {x.n_samples}")
    b = split_boundaries(x.n_samples)
    return RecordingSplit(
        train_head=x.slice(b[0], b[1]),
        validation=x.slice(b[1], b[2]),
        test=x.slice(b[2], b[3]),
        train_tail=x.slice(b[3], b[4]),
        boundaries=b,
    )


def fit_normalization(train: TimeSeries | Sequence[TimeSeries]) -> NormalizationStats:
    """Per-channel mean and (population) standard deviation of training data."""
    if isinstance(train, TimeSeries):
        data = train.data
    else:
        data = np.concatenate([t.data for t in train])
    if data.shape[0] == 0:
        raise ValueError("training segment is empty")
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    if np.any(std <= 0):
        bad = np.flatnonzero(std <= 0).tolist()
        raise ValueError(f"zero-variance channel(s) at index {bad}")
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(x: TimeSeries, stats: NormalizationStats) -> TimeSeries:
    if stats.mean.shape != (x.n_channels,):
        raise ValueError("normalization stats do not match channel count")
    return x.with_data((x.data - stats.mean) / stats.std)


def invert_normalization(x: TimeSeries, stats: NormalizationStats) -> TimeSeries:
    return x.with_data(x.data * stats.std + stats.mean)


def identity_artifact_removal(x: TimeSeries) -> TimeSeries:
    """Default artifact-removal stage: passes the signal through unchanged."""
    return x


def preprocess_recording(
    x: TimeSeries,
    *,
    highpass_hz: float = 0.5,
    filter_order: int = 4,
    intermediate_fs: float | None = 1024.0,
    target_fs: float = 64.0,
    artifact_removal: Callable[[TimeSeries], TimeSeries] = identity_artifact_removal,
) -> TimeSeries:
    """High-pass, resample, remove artifacts, re-reference, resample again.

    ``intermediate_fs`` is skipped when ``None`` or not below the input rate.
    """
    y = highpass_zero_phase(x, highpass_hz, filter_order)
    if intermediate_fs is not None and intermediate_fs < y.fs:
        y = resample(y, intermediate_fs)
    y = artifact_removal(y)
    y = common_average_reference(y)
    if y.fs != target_fs:
        y = resample(y, target_fs)
    return y


# -- binary persistence ------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def write_binary(path: str | Path, data: np.ndarray, fs: float, names: Sequence[str], **extra) -> Path:
    """Write ``data`` as little-endian float32, sample-major, plus a JSON sidecar.

    The sidecar lives next to the binary at ``<path>.json``. Extra keyword
    arguments are stored in the sidecar verbatim.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("expected a 2-D array")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    meta = {"fs": float(fs), "n_channels": int(data.shape[1]), "channel_names": list(names),
            "n_samples": int(data.shape[0])}
    meta.update(extra)
    _sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_sidecar(path: str | Path) -> dict:
    return json.loads(_sidecar_path(Path(path)).read_text())


def read_binary(path: str | Path) -> tuple[np.ndarray, dict]:
    """Inverse of :func:`write_binary`; returns float64 data and the sidecar."""
    path = Path(path)
    meta = read_sidecar(path)
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = meta["n_samples"] * meta["n_channels"]
    if raw.size != expected:
        raise ValueError(f"{path}: {raw.size} values on disk, sidecar says {expected}")
    return raw.reshape(meta["n_samples"], meta["n_channels"]).astype(np.float64), meta


def save_timeseries(path: str | Path, x: TimeSeries, **extra) -> Path:
    return write_binary(path, x.data, x.fs, x.channel_names, **extra)


def load_timeseries(path: str | Path) -> TimeSeries:
    data, meta = read_binary(path)
    return TimeSeries(data, meta["fs"], tuple(meta["channel_names"]))
