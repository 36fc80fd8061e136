"""Onset-based speech representations built from forced-alignment intervals.

Alignments arrive as TSV files (``tier, label, start_s, end_s``). Each
representation is a binary matrix sampled at the EEG rate: VAD marks speech
activity, every other scheme places a single 1 at the onset sample of each
qualifying unit.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .signals import read_binary, write_binary

logger = logging.getLogger(__name__)

TIERS = ("phone", "syllable")
BPC_CLASSES = ("short_vowel", "long_vowel", "plosive", "fricative", "nasal_approximant")
VOWEL_CLASSES = frozenset({"short_vowel", "long_vowel"})
N_NPC = 37
DEFAULT_SILENCE = frozenset({"sil"})
ALIGNMENT_HEADER = ["tier", "label", "start_s", "end_s"]


class Scheme(str, Enum):
    VAD = "VAD"
    NPC = "NPC"
    BPC = "BPC"
    VC = "VC"
    PHONE = "PHONE"
    VOWEL = "VOWEL"
    CONSONANT = "CONSONANT"
    SYLLABLE = "SYLLABLE"


SCHEME_DIMS = {
    Scheme.VAD: 1,
    Scheme.NPC: N_NPC,
    Scheme.BPC: len(BPC_CLASSES),
    Scheme.VC: 2,
    Scheme.PHONE: 1,
    Scheme.VOWEL: 1,
    Scheme.CONSONANT: 1,
    Scheme.SYLLABLE: 1,
}


@dataclass(frozen=True)
class Interval:
    tier: str
    label: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class AlignmentTrack:
    """Interval annotations, sorted by start time within each tier."""

    intervals: tuple[Interval, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for iv in self.intervals:
            if iv.tier not in TIERS:
                raise ValueError(f"unknown tier {iv.tier!r}")
            if not iv.end_s > iv.start_s:
                raise ValueError(f"interval {iv} has end_s <= start_s")
            if iv.start_s < 0:
                raise ValueError(f"interval {iv} starts before 0")
        intervals = tuple(sorted(self.intervals, key=lambda iv: (TIERS.index(iv.tier), iv.start_s, iv.end_s)))
        for tier in TIERS:
            rows = [iv for iv in intervals if iv.tier == tier]
            for prev, cur in zip(rows, rows[1:]):
                if cur.start_s < prev.end_s:
                    raise ValueError(f"overlapping {tier} intervals: {prev} and {cur}")
        object.__setattr__(self, "intervals", intervals)

    def tier(self, name: str) -> list[Interval]:
        return [iv for iv in self.intervals if iv.tier == name]

    @property
    def end_s(self) -> float:
        return max((iv.end_s for iv in self.intervals), default=0.0)

    def labels(self, tier: str = "phone") -> set[str]:
        return {iv.label for iv in self.tier(tier)}

    def validate_labels(self, inventory: "PhoneInventory", silence: Iterable[str] = DEFAULT_SILENCE) -> None:
        unknown = self.labels("phone") - set(silence) - set(inventory.entries)
        if unknown:
            raise ValueError(f"labels not in inventory: {sorted(unknown)}")


def load_alignment(path: str | Path) -> AlignmentTrack:
    """Read an alignment TSV. Out-of-order rows are sorted and a warning kept."""
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ALIGNMENT_HEADER:
            raise ValueError(f"{path}: expected header {ALIGNMENT_HEADER}, got {header}")
        intervals = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            tier, label, start, end = row
            if tier not in TIERS:
                raise ValueError(f"{path}:{lineno}: unknown tier {tier!r}")
            try:
                iv = Interval(tier, label, float(start), float(end))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed time field") from exc
            intervals.append(iv)
    warnings = []
    for tier in TIERS:
        starts = [iv.start_s for iv in intervals if iv.tier == tier]
        if starts != sorted(starts):
            msg = f"{path}: {tier} rows out of order; sorted on load"
            logger.warning(msg)
            warnings.append(msg)
    return AlignmentTrack(tuple(intervals), tuple(warnings))


def save_alignment(track: AlignmentTrack, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(ALIGNMENT_HEADER)
        for iv in track.intervals:
            writer.writerow([iv.tier, iv.label, repr(iv.start_s), repr(iv.end_s)])
    return path


@dataclass(frozen=True)
class PhoneEntry:
    npc_index: int
    is_vowel: bool
    bpc_class: str


@dataclass(frozen=True)
class PhoneInventory:
    entries: Mapping[str, PhoneEntry]

    def __post_init__(self):
        by_index: dict[int, str] = {}
        for label, e in self.entries.items():
            if not 0 <= e.npc_index < N_NPC:
                raise ValueError(f"{label}: npc_index {e.npc_index} outside [0, {N_NPC - 1}]")
            if e.bpc_class not in BPC_CLASSES:
                raise ValueError(f"{label}: unknown bpc_class {e.bpc_class!r}")
            if e.is_vowel != (e.bpc_class in VOWEL_CLASSES):
                raise ValueError(f"{label}: is_vowel disagrees with bpc_class {e.bpc_class}")
            # labels sharing an NPC column must agree on the coarser classes
            other = by_index.setdefault(e.npc_index, label)
            if self.entries[other].bpc_class != e.bpc_class:
                raise ValueError(f"{label} and {other} share npc_index {e.npc_index} but differ in bpc_class")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Mapping]) -> "PhoneInventory":
        return cls({
            label: PhoneEntry(int(v["npc_index"]), bool(v["is_vowel"]), str(v["bpc_class"]))
            for label, v in raw.items()
        })

    def to_dict(self) -> dict:
        return {label: {"npc_index": e.npc_index, "is_vowel": e.is_vowel, "bpc_class": e.bpc_class}
                for label, e in self.entries.items()}

    def npc_names(self) -> list[str]:
        names = [f"npc{k}" for k in range(N_NPC)]
        for label in sorted(self.entries, reverse=True):
            names[self.entries[label].npc_index] = label
        return names

    def labels_by_class(self, bpc_class: str) -> list[str]:
        return [lab for lab, e in self.entries.items() if e.bpc_class == bpc_class]


def load_inventory(path: str | Path | None = None) -> PhoneInventory:
    """Load a JSON inventory; ``None`` gives the bundled default."""
    if path is None:
        text = resources.files("phonetrack.data").joinpath("default_inventory.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    return PhoneInventory.from_dict(json.loads(text))


@dataclass(frozen=True)
class FeatureMatrix:
    """Binary speech representation, ``[n_samples, n_dims]``."""

    data: np.ndarray
    fs: float
    dim_names: tuple[str, ...]
    scheme: Scheme
    has_vad: bool = False
    n_collisions: int = 0
    n_clipped: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != len(self.dim_names):
            raise ValueError(f"data shape {data.shape} does not match {len(self.dim_names)} dim names")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("feature values must be 0 or 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "dim_names", tuple(self.dim_names))
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]


def onset_index(start_s: float, fs: float, n_samples: int) -> tuple[int, bool]:
    """Sample index of an onset and whether it had to be clipped."""
    idx = int(np.floor(0.5 + start_s * fs))
    clipped = min(max(idx, 0), n_samples - 1)
    return clipped, clipped != idx


def _check_coverage(track: AlignmentTrack, fs: float, n_samples: int):
    needed = int(np.floor(0.5 + track.end_s * fs))
    if needed > n_samples:
        raise ValueError(f"track needs {needed} samples at {fs} Hz, only {n_samples} available")


def encode_vad(
    track: AlignmentTrack, fs: float, n_samples: int, silence: Iterable[str] = DEFAULT_SILENCE
) -> FeatureMatrix:
    """1 where sample time ``k / fs`` falls inside a non-silence phone interval."""
    _check_coverage(track, fs, n_samples)
    silence = set(silence)
    t = np.arange(n_samples) / fs
    out = np.zeros((n_samples, 1))
    for iv in track.tier("phone"):
        if iv.label in silence:
            continue
        lo = np.searchsorted(t, iv.start_s, side="left")
        hi = np.searchsorted(t, iv.end_s, side="left")
        out[lo:hi, 0] = 1.0
    return FeatureMatrix(out, fs, ("vad",), Scheme.VAD, has_vad=False)


def _dim_names(scheme: Scheme, inventory: PhoneInventory) -> tuple[str, ...]:
    return {
        Scheme.NPC: tuple(inventory.npc_names()),
        Scheme.BPC: BPC_CLASSES,
        Scheme.VC: ("vowel", "consonant"),
        Scheme.PHONE: ("phone",),
        Scheme.VOWEL: ("vowel",),
        Scheme.CONSONANT: ("consonant",),
        Scheme.SYLLABLE: ("syllable",),
    }[scheme]


def _column(scheme: Scheme, entry: PhoneEntry) -> int | None:
    if scheme is Scheme.NPC:
        return entry.npc_index
    if scheme is Scheme.BPC:
        return BPC_CLASSES.index(entry.bpc_class)
    if scheme is Scheme.VC:
        return 0 if entry.is_vowel else 1
    if scheme is Scheme.PHONE:
        return 0
    if scheme is Scheme.VOWEL:
        return 0 if entry.is_vowel else None
    if scheme is Scheme.CONSONANT:
        return None if entry.is_vowel else 0
    raise ValueError(f"no phone column for scheme {scheme}")


def encode_onsets(
    track: AlignmentTrack,
    inventory: PhoneInventory,
    scheme: Scheme | str,
    fs: float,
    n_samples: int,
    silence: Iterable[str] = DEFAULT_SILENCE,
) -> FeatureMatrix:
    """Place a 1 at each qualifying onset in the column the scheme assigns.

    Two onsets landing on the same sample and column leave a single 1 and
    bump ``n_collisions``. Onsets outside the recording are clipped to its
    first or last sample and counted in ``n_clipped``.
    """
    scheme = Scheme(scheme)
    if scheme is Scheme.VAD:
        raise ValueError("use encode_vad for the VAD scheme")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    silence = set(silence)
    out = np.zeros((n_samples, SCHEME_DIMS[scheme]))
    collisions = clipped = 0

    if scheme is Scheme.SYLLABLE:
        if track.intervals and not track.tier("syllable"):
            raise ValueError("syllable scheme requested but the track has no syllable tier")
        placements = [(iv.start_s, 0) for iv in track.tier("syllable") if iv.label not in silence]
    else:
        track.validate_labels(inventory, silence)
        placements = []
        for iv in track.tier("phone"):
            if iv.label in silence:
                continue
            col = _column(scheme, inventory.entries[iv.label])
            if col is not None:
                placements.append((iv.start_s, col))

    for start_s, col in placements:
        idx, was_clipped = onset_index(start_s, fs, n_samples)
        clipped += was_clipped
        if out[idx, col]:
            collisions += 1
        out[idx, col] = 1.0
    return FeatureMatrix(out, fs, _dim_names(scheme, inventory), scheme,
                         n_collisions=collisions, n_clipped=clipped)


def prepend_vad(features: FeatureMatrix, vad: FeatureMatrix) -> FeatureMatrix:
    if features.n_samples != vad.n_samples or features.fs != vad.fs:
        raise ValueError("VAD and features differ in length or sampling rate")
    if vad.n_dims != 1:
        raise ValueError("VAD must be one-dimensional")
    return FeatureMatrix(
        np.hstack([vad.data, features.data]),
        features.fs,
        ("vad",) + features.dim_names,
        features.scheme,
        has_vad=True,
        n_collisions=features.n_collisions,
        n_clipped=features.n_clipped,
    )


def encode(
    track: AlignmentTrack,
    inventory: PhoneInventory,
    scheme: Scheme | str,
    fs: float,
    n_samples: int,
    *,
    with_vad: bool = True,
    silence: Iterable[str] = DEFAULT_SILENCE,
) -> FeatureMatrix:
    """The representation used for modelling: onsets with VAD as column 0."""
    scheme = Scheme(scheme)
    vad = encode_vad(track, fs, n_samples, silence)
    if scheme is Scheme.VAD:
        return vad
    onsets = encode_onsets(track, inventory, scheme, fs, n_samples, silence)
    return prepend_vad(onsets, vad) if with_vad else onsets


def save_features(path: str | Path, fm: FeatureMatrix) -> Path:
    return write_binary(path, fm.data, fm.fs, fm.dim_names, dim_names=list(fm.dim_names),
                        scheme=fm.scheme.value, has_vad=fm.has_vad)


def load_features(path: str | Path) -> FeatureMatrix:
    data, meta = read_binary(path)
    return FeatureMatrix(data, meta["fs"], tuple(meta["dim_names"]), Scheme(meta["scheme"]),
                         has_vad=meta.get("has_vad", False))


def group_columns(fm: FeatureMatrix, groups: Sequence[Sequence[int]]) -> np.ndarray:
    """Sum column groups of ``fm``; used to check scheme marginalization."""
    return np.stack([fm.data[:, list(g)].sum(axis=1) for g in groups], axis=1)
