"""Synthetic subjects with known response kernels.

A subject is built in four steps: a random phone/syllable alignment, its
onset features, convolution of each feature with a ground-truth kernel
spread over the scalp by a mixing matrix, and additive noise at a chosen
per-channel SNR. Because ``clean = lag_matrix(features) @ weights`` holds
exactly, the stored weights are what a noise-free ridge fit must recover.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import (
    SCHEME_DIMS,
    AlignmentTrack,
    FeatureMatrix,
    Interval,
    PhoneInventory,
    Scheme,
    encode,
    load_inventory,
    save_alignment,
)
from .montage import BIOSEMI64
from .seeding import derive_seed
from .signals import TimeSeries, save_timeseries, write_binary
from .trf import lag_matrix, n_lags_for_window


@dataclass(frozen=True)
class Bump:
    """Gaussian-shaped lobe of a response kernel; the sign lives in ``amplitude``."""

    latency_ms: float
    width_ms: float
    amplitude: float


VAD_KERNEL = (Bump(100, 25, 0.5), Bump(200, 30, 0.35), Bump(370, 25, -0.35))
VOWEL_KERNEL = (Bump(130, 20, 1.0), Bump(220, 25, 0.6), Bump(370, 25, -0.6))
CONSONANT_KERNEL = (Bump(80, 20, -0.8), Bump(270, 40, 0.5))


def default_kernels(dim_names: Sequence[str], inventory: PhoneInventory | None = None) -> dict[str, tuple[Bump, ...]]:
    """Vowel-like kernels for vowel dimensions, consonant-like for the rest, VAD separate."""
    inventory = inventory or load_inventory()
    vowel_names = {"vowel", "short_vowel", "long_vowel"}
    vowel_names |= {lab for lab, e in inventory.entries.items() if e.is_vowel}
    out = {}
    for name in dim_names:
        if name == "vad":
            out[name] = VAD_KERNEL
        elif name in vowel_names:
            out[name] = VOWEL_KERNEL
        else:
            out[name] = CONSONANT_KERNEL
    return out


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    duration_s: float = 120.0
    fs: float = 64.0
    window_ms: float = 400.0
    scheme: Scheme = Scheme.VC
    kernels: Mapping[str, tuple[Bump, ...]] | None = None
    channel_names: tuple[str, ...] = BIOSEMI64
    mixing_jitter: float = 0.3
    noise: str = "pink"
    snr_db: float | None = 0.0
    phone_ms: tuple[float, float] = (50.0, 150.0)
    pause_s: tuple[float, float] = (0.15, 0.6)
    syllables_per_run: tuple[int, int] = (2, 8)
    inventory_path: str | None = None

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.noise not in ("white", "pink"):
            raise ValueError(f"noise model must be 'white' or 'pink', got {self.noise!r}")
        if self.snr_db is not None and math.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")
        if min(self.phone_ms) <= 0 or min(self.pause_s) <= 0:
            raise ValueError("durations must be positive")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def n_samples(self) -> int:
        return int(math.floor(0.5 + self.duration_s * self.fs))

    def inventory(self) -> PhoneInventory:
        return load_inventory(self.inventory_path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        if self.kernels is not None:
            d["kernels"] = {k: [asdict(b) for b in v] for k, v in self.kernels.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        if d.get("kernels") is not None:
            d["kernels"] = {k: tuple(Bump(**b) for b in v) for k, v in d["kernels"].items()}
        for key in ("channel_names", "phone_ms", "pause_s", "syllables_per_run"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    kernels: np.ndarray  # [D, L]
    mixing: np.ndarray  # [D, C]
    weights: np.ndarray  # [D * L, C], same layout as a fitted TRF
    clean: np.ndarray  # [T, C]
    noise: np.ndarray  # [T, C]
    dim_names: tuple[str, ...]
    lag_ms: np.ndarray


# syllable shapes; roughly 60 % start with a consonant
_SYLLABLE_SHAPES = ("CV", "CVC", "CV", "V", "VC", "CCV", "CVCC", "V")


def generate_alignment(cfg: SynthConfig, seed: int | None = None) -> AlignmentTrack:
    """Alternating silence and speech runs tiling ``[0, duration_s]``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    inv = cfg.inventory()
    vowels = sorted(lab for lab, e in inv.entries.items() if e.is_vowel)
    consonants = sorted(lab for lab, e in inv.entries.items() if not e.is_vowel)
    T = float(cfg.duration_s)
    phones: list[Interval] = []
    syllables: list[Interval] = []
    t = 0.0

    def add(tier_list, tier, label, start, end):
        end = min(end, T)
        if end > start:
            tier_list.append(Interval(tier, label, start, end))

    while t < T:
        pause = rng.uniform(*cfg.pause_s)
        add(phones, "phone", "sil", t, t + pause)
        add(syllables, "syllable", "sil", t, t + pause)
        t += pause
        n_syl = int(rng.integers(cfg.syllables_per_run[0], cfg.syllables_per_run[1] + 1))
        for _ in range(n_syl):
            if t >= T:
                break
            shape = _SYLLABLE_SHAPES[int(rng.integers(len(_SYLLABLE_SHAPES)))]
            syl_start = t
            labels = []
            for slot in shape:
                pool = vowels if slot == "V" else consonants
                label = pool[int(rng.integers(len(pool)))]
                dur = rng.uniform(*cfg.phone_ms) / 1000.0
                if t < T:
                    add(phones, "phone", label, t, t + dur)
                    labels.append(label)
                t += dur
            add(syllables, "syllable", ".".join(labels), syl_start, t)
    return AlignmentTrack(tuple(phones + syllables))


def kernel_curve(bumps: Sequence[Bump], lag_ms: np.ndarray, window_ms: float) -> np.ndarray:
    for b in bumps:
        if not 0 <= b.latency_ms <= window_ms:
            raise ValueError(f"kernel lobe at {b.latency_ms} ms falls outside the {window_ms} ms lag window")
    out = np.zeros_like(lag_ms, dtype=np.float64)
    for b in bumps:
        out += b.amplitude * np.exp(-0.5 * ((lag_ms - b.latency_ms) / b.width_ms) ** 2)
    return out


def base_mixing(n_dims: int, n_channels: int, seed: int) -> np.ndarray:
    """Smooth-ish random spatial patterns, one per feature dimension, unit RMS."""
    rng = np.random.default_rng(seed)
    pos = np.linspace(0, 2 * np.pi, n_channels, endpoint=False)
    out = np.empty((n_dims, n_channels))
    for d in range(n_dims):
        coef = rng.standard_normal(4)
        pattern = (coef[0] + coef[1] * np.cos(pos) + coef[2] * np.sin(2 * pos) + coef[3] * np.cos(3 * pos)
                   + 0.3 * rng.standard_normal(n_channels))
        out[d] = pattern / np.sqrt(np.mean(pattern ** 2))
    return out


def subject_mixing(base: np.ndarray, jitter: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return base + jitter * rng.standard_normal(base.shape)


def _pink(rng: np.random.Generator, n: int, c: int, fs: float) -> np.ndarray:
    white = rng.standard_normal((n, c))
    if n < 2:
        return white
    spectrum = np.fft.rfft(white, axis=0)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    f[0] = f[1]
    spectrum *= (1.0 / np.sqrt(f))[:, None]
    return np.fft.irfft(spectrum, n=n, axis=0)


def make_noise(cfg: SynthConfig, clean: np.ndarray, seed: int) -> np.ndarray:
    """Noise scaled so ``var(clean) / var(noise)`` equals the SNR per channel."""
    n, c = clean.shape
    if cfg.snr_db is None or cfg.snr_db == math.inf:
        return np.zeros_like(clean)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n, c)) if cfg.noise == "white" else _pink(rng, n, c, cfg.fs)
    raw = raw - raw.mean(axis=0)
    p_sig = clean.var(axis=0)
    p_raw = raw.var(axis=0)
    # channels without signal get unit-variance noise
    p_sig = np.where(p_sig > 0, p_sig, 10 ** (cfg.snr_db / 10))
    return raw * np.sqrt(p_sig / (p_raw * 10 ** (cfg.snr_db / 10)))


def generate_eeg(
    cfg: SynthConfig,
    features: FeatureMatrix,
    seed: int | None = None,
    *,
    mixing: np.ndarray | None = None,
) -> tuple[TimeSeries, GroundTruth]:
    """EEG = lagged features x ground-truth weights + noise."""
    if features.fs != cfg.fs:
        raise ValueError(f"features at {features.fs} Hz, config expects {cfg.fs} Hz")
    seed = cfg.seed if seed is None else seed
    L = n_lags_for_window(cfg.window_ms, cfg.fs)
    lag_ms = np.arange(L) * 1000.0 / cfg.fs
    kernel_spec = dict(default_kernels(features.dim_names, cfg.inventory()))
    kernel_spec.update(cfg.kernels or {})
    kernels = np.stack([kernel_curve(kernel_spec[name], lag_ms, cfg.window_ms) for name in features.dim_names])
    C = len(cfg.channel_names)
    if mixing is None:
        mixing = base_mixing(features.n_dims, C, derive_seed(seed, "mixing"))
    if mixing.shape != (features.n_dims, C):
        raise ValueError(f"mixing shape {mixing.shape} != ({features.n_dims}, {C})")
    weights = (kernels[:, :, None] * mixing[:, None, :]).reshape(features.n_dims * L, C)
    clean = lag_matrix(features.data, L) @ weights
    noise = make_noise(cfg, clean, derive_seed(seed, "noise"))
    eeg = TimeSeries(clean + noise, cfg.fs, cfg.channel_names)
    return eeg, GroundTruth(kernels, mixing, weights, clean, noise, features.dim_names, lag_ms)


@dataclass
class SyntheticSubject:
    subject_id: str
    alignment: AlignmentTrack
    features: FeatureMatrix
    eeg: TimeSeries
    truth: GroundTruth


def n_generating_dims(cfg: SynthConfig) -> int:
    return 1 if cfg.scheme is Scheme.VAD else 1 + SCHEME_DIMS[cfg.scheme]


def generate_subject(cfg: SynthConfig, index: int) -> SyntheticSubject:
    """One subject; the base mixing is shared, the jitter is subject-specific."""
    inv = cfg.inventory()
    align = generate_alignment(cfg, derive_seed(cfg.seed, "alignment", index))
    feats = encode(align, inv, cfg.scheme, cfg.fs, cfg.n_samples)
    base = base_mixing(n_generating_dims(cfg), len(cfg.channel_names), derive_seed(cfg.seed, "base-mixing"))
    mixing = subject_mixing(base, cfg.mixing_jitter, derive_seed(cfg.seed, "subject-mixing", index))
    eeg, truth = generate_eeg(cfg, feats, derive_seed(cfg.seed, "eeg", index), mixing=mixing)
    return SyntheticSubject(f"sub-{index:03d}", align, feats, eeg, truth)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_corpus(n_subjects: int, cfg: SynthConfig, out_dir: str | Path, seed: int | None = None) -> dict:
    """Write ``n_subjects`` subjects plus a manifest with SHA-256 checksums.

    Layout per subject: ``<id>/alignment.tsv``, ``<id>/eeg.f32`` (+ sidecar)
    and ``<id>/truth_weights.f32`` (+ sidecar with kernels and mixing).
    """
    if n_subjects < 0:
        raise ValueError("n_subjects must be >= 0")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    subjects = []
    for i in range(n_subjects):
        sub = generate_subject(cfg, i)
        sdir = out / sub.subject_id
        written.append(save_alignment(sub.alignment, sdir / "alignment.tsv"))
        written.append(save_timeseries(sdir / "eeg.f32", sub.eeg, subject=sub.subject_id))
        written.append(sdir / "eeg.f32.json")
        tw = write_binary(sdir / "truth_weights.f32", sub.truth.weights, cfg.fs, sub.eeg.channel_names,
                          dim_names=list(sub.truth.dim_names), n_lags=len(sub.truth.lag_ms),
                          kernels=sub.truth.kernels.tolist(), mixing=sub.truth.mixing.tolist())
        written.extend([tw, sdir / "truth_weights.f32.json"])
        subjects.append({"id": sub.subject_id, "eeg": f"{sub.subject_id}/eeg.f32",
                         "alignment": f"{sub.subject_id}/alignment.tsv"})
    manifest = {
        "kind": "synthetic-corpus",
        "seed": cfg.seed,
        "n_subjects": n_subjects,
        "config": cfg.to_dict(),
        "subjects": subjects,
        "files": [{"path": p.relative_to(out).as_posix(), "sha256": _sha256(p), "bytes": p.stat().st_size}
                  for p in written],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(root: str | Path, manifest: dict | None = None) -> list[str]:
    """Checksum every listed file; returns a list of problems (empty when valid)."""
    root = Path(root)
    manifest = manifest or json.loads((root / "manifest.json").read_text())
    problems = []
    for entry in manifest["files"]:
        p = root / entry["path"]
        if not p.exists():
            problems.append(f"missing: {entry['path']}")
        elif _sha256(p) != entry["sha256"]:
            problems.append(f"checksum mismatch: {entry['path']}")
    return problems
