"""Paired nonparametric comparisons across subjects."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

EXACT_MAX_N = 25


@dataclass(frozen=True)
class PairedSample:
    condition_a: np.ndarray
    condition_b: np.ndarray
    subjects: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.asarray(self.condition_a, dtype=np.float64)
        b = np.asarray(self.condition_b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("paired conditions must be 1-D and of equal length")
        if self.subjects and len(self.subjects) != a.size:
            raise ValueError("subject ids do not match sample length")
        object.__setattr__(self, "condition_a", a)
        object.__setattr__(self, "condition_b", b)

    @property
    def differences(self) -> np.ndarray:
        return self.condition_a - self.condition_b


def signed_rank_statistic(d: np.ndarray) -> tuple[float, np.ndarray]:
    """W+ and the mid-ranks of ``|d|`` after dropping zero differences."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d), method="average")
    return float(ranks[d > 0].sum()), ranks


def _exact_null_counts(ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+ (mid-ranks doubled to integers)."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(pairs: PairedSample | Sequence[float], *, exact: bool | None = None) -> float:
    """Two-sided signed-rank p value.

    Zero differences are dropped and ties get mid-ranks. With at most 25
    non-zero differences the null distribution is enumerated exactly (over
    doubled ranks, so ties stay exact); above that a normal approximation
    with tie and continuity corrections is used.
    """
    d = pairs.differences if isinstance(pairs, PairedSample) else np.asarray(pairs, dtype=np.float64)
    w_plus, ranks = signed_rank_statistic(d)
    n = ranks.size
    if n == 0:
        raise ValueError("all paired differences are zero")
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        counts = _exact_null_counts(ranks)
        w2 = int(round(2 * w_plus))
        total = 2.0 ** n
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        return float(min(1.0, 2 * min(lower, upper)))
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2 * sps.norm.sf(z)))


def holm_bonferroni(pvals: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p values, in the input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1) | np.isnan(p)):
        raise ValueError("p values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = (m - np.arange(m)) * p[order]
    adjusted_sorted = np.minimum(1.0, np.maximum.accumulate(scaled))
    out = np.empty(m)
    out[order] = adjusted_sorted
    return out.tolist()


@dataclass(frozen=True)
class ComparisonRow:
    pair: str
    raw_p: float
    adjusted_p: float
    median_diff: float
    n: int


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]

    def __getitem__(self, pair: str) -> ComparisonRow:
        for r in self.rows:
            if r.pair == pair:
                return r
        raise KeyError(pair)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "raw_p", "adjusted_p", "median_diff", "n"])
            for r in self.rows:
                w.writerow([r.pair, repr(r.raw_p), repr(r.adjusted_p), repr(r.median_diff), r.n])
        return path


def pair_name(a: str, b: str) -> str:
    return f"{a} vs {b}"


def compare_schemes(
    metrics: Mapping[str, Mapping[str, float]],
    pairs: Sequence[tuple[str, str]],
) -> ComparisonTable:
    """Wilcoxon test per requested (scheme_a, scheme_b) pair, Holm-corrected.

    ``metrics[scheme][subject]`` holds one scalar per subject. A pair whose
    differences are all zero gets p = 1.
    """
    raw, medians, ns = [], [], []
    for a, b in pairs:
        subj_a, subj_b = set(metrics[a]), set(metrics[b])
        if subj_a != subj_b:
            raise ValueError(f"{a} and {b} cover different subjects: {sorted(subj_a ^ subj_b)}")
        subjects = sorted(subj_a)
        sample = PairedSample(np.array([metrics[a][s] for s in subjects]),
                              np.array([metrics[b][s] for s in subjects]), tuple(subjects))
        d = sample.differences
        raw.append(1.0 if np.all(d == 0) else wilcoxon_signed_rank(sample))
        medians.append(float(np.median(d)))
        ns.append(len(subjects))
    adjusted = holm_bonferroni(raw)
    rows = tuple(ComparisonRow(pair_name(a, b), p, q, med, n)
                 for (a, b), p, q, med, n in zip(pairs, raw, adjusted, medians, ns))
    return ComparisonTable(rows)
