"""Linear forward models: lagged ridge regression from speech features to EEG."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, stats

from .montage import FRONTO_TEMPORAL_27
from .signals import TimeSeries, apply_normalization, fit_normalization, split_boundaries

DEFAULT_WINDOW_MS = 400.0
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-3, 6, 10))


def n_lags_for_window(window_ms: float, fs: float) -> int:
    """Number of lags ``floor(window_ms * fs / 1000) + 1``, lag 0 included."""
    if window_ms < 0:
        raise ValueError("window_ms must be >= 0")
    # tolerance keeps e.g. 15.625 ms at 64 Hz from flooring to 0
    return int(np.floor(window_ms * fs / 1000.0 + 1e-9)) + 1


@dataclass(frozen=True)
class LaggedDesignMatrix:
    """Row ``t`` holds feature ``d`` at sample ``t - l`` in column ``d * L + l``."""

    data: np.ndarray
    n_lags: int
    n_dims: int
    fs: float
    dim_names: tuple[str, ...] = ()

    @property
    def lag_times_ms(self) -> np.ndarray:
        return np.arange(self.n_lags) * 1000.0 / self.fs

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]


def lag_matrix(x: np.ndarray, n_lags: int) -> np.ndarray:
    """Zero-padded lag expansion of ``x`` [T, D] into [T, D * n_lags]."""
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    out = np.zeros((T, D, n_lags))
    for lag in range(n_lags):
        if lag < T:
            out[lag:, :, lag] = x[: T - lag]
    return out.reshape(T, D * n_lags)


def build_lagged_matrix(features, window_ms: float = DEFAULT_WINDOW_MS) -> LaggedDesignMatrix:
    """Lag a feature matrix (anything with ``data`` and ``fs``) over the integration window."""
    L = n_lags_for_window(window_ms, features.fs)
    data = np.asarray(features.data)
    names = tuple(getattr(features, "dim_names", ())) or tuple(f"dim{d}" for d in range(data.shape[1]))
    return LaggedDesignMatrix(lag_matrix(data, L), L, data.shape[1], float(features.fs), names)


def stack_designs(parts: Sequence[LaggedDesignMatrix]) -> LaggedDesignMatrix:
    """Concatenate separately-lagged pieces so lags never cross a cut."""
    first = parts[0]
    if any(p.n_lags != first.n_lags or p.n_dims != first.n_dims for p in parts):
        raise ValueError("design matrices disagree in lag count or dimensions")
    return LaggedDesignMatrix(np.concatenate([p.data for p in parts]), first.n_lags, first.n_dims,
                              first.fs, first.dim_names)


def stack_series(parts: Sequence[TimeSeries]) -> TimeSeries:
    return TimeSeries(np.concatenate([p.data for p in parts]), parts[0].fs, parts[0].channel_names)


@dataclass(frozen=True)
class TrfModel:
    weights: np.ndarray  # [(D * L), C]
    lam: float
    lag_times_ms: tuple[float, ...]
    dim_names: tuple[str, ...]
    channel_names: tuple[str, ...]
    fs: float

    @property
    def n_lags(self) -> int:
        return len(self.lag_times_ms)

    @property
    def n_dims(self) -> int:
        return len(self.dim_names)

    def __post_init__(self):
        W = np.asarray(self.weights)
        if W.shape != (self.n_dims * self.n_lags, len(self.channel_names)):
            raise ValueError(f"weights {W.shape} inconsistent with {self.n_dims} dims x {self.n_lags} lags "
                             f"x {len(self.channel_names)} channels")
        if not np.all(np.isfinite(W)):
            raise ValueError("non-finite TRF weights")


def _solve_ridge(gram: np.ndarray, cross: np.ndarray, lam: float) -> np.ndarray:
    A = gram + lam * np.eye(gram.shape[0])
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ValueError(f"ridge system is singular at lambda={lam}") from exc
    if lam == 0 and np.linalg.cond(A) > 1.0 / (np.finfo(float).eps * A.shape[0]):
        raise ValueError("S^T S is numerically singular; use lambda > 0")
    return linalg.cho_solve(factor, cross, check_finite=False)


def ridge_fit(S: LaggedDesignMatrix, R: TimeSeries, lam: float) -> TrfModel:
    """Closed-form ridge solution ``(S'S + lam I)^-1 S'R`` via Cholesky."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if S.n_samples != R.n_samples:
        raise ValueError(f"design has {S.n_samples} rows, EEG has {R.n_samples} samples")
    W = _solve_ridge(S.data.T @ S.data, S.data.T @ R.data, lam)
    return TrfModel(W, float(lam), tuple(S.lag_times_ms.tolist()), S.dim_names, R.channel_names, S.fs)


def predict_eeg(model: TrfModel, S: LaggedDesignMatrix) -> TimeSeries:
    if S.data.shape[1] != model.weights.shape[0]:
        raise ValueError(f"design has {S.data.shape[1]} columns, model expects {model.weights.shape[0]}")
    return TimeSeries(S.data @ model.weights, S.fs, model.channel_names)


def _pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("Spearman correlation is undefined for a constant input")
    return np.clip((a * b).sum(axis=0) / (na * nb), -1.0, 1.0)


def spearman(a, b) -> float:
    """Pearson correlation of mid-ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D vectors of equal length")
    if a.size < 2:
        raise ValueError("need at least 2 observations")
    return float(spearman_columns(a[:, None], b[:, None])[0])


def spearman_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Spearman correlation of two [T, C] arrays."""
    ra = stats.rankdata(a, axis=0, method="average")
    rb = stats.rankdata(b, axis=0, method="average")
    return _pearson_columns(ra, rb)


@dataclass(frozen=True)
class EvaluationReport:
    rho: np.ndarray
    channel_names: tuple[str, ...]
    subset: tuple[str, ...]
    subject: str = ""
    scheme: str = ""
    lam: float = float("nan")

    @property
    def mean_rho(self) -> float:
        idx = [self.channel_names.index(c) for c in self.subset]
        return float(np.mean(self.rho[idx]))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.channel_names, self.rho.tolist()))


def _resolve_subset(channel_names: Sequence[str], subset: Iterable[str] | None) -> tuple[str, ...]:
    if subset is None:
        subset = FRONTO_TEMPORAL_27 if set(FRONTO_TEMPORAL_27) <= set(channel_names) else channel_names
    subset = tuple(subset)
    missing = set(subset) - set(channel_names)
    if missing:
        raise ValueError(f"evaluation channels not in recording: {sorted(missing)}")
    return subset


def evaluate(
    model: TrfModel,
    S: LaggedDesignMatrix,
    R: TimeSeries,
    *,
    channels: Iterable[str] | None = None,
    subject: str = "",
    scheme: str = "",
) -> EvaluationReport:
    """Spearman correlation between predicted and recorded EEG, per channel."""
    pred = predict_eeg(model, S)
    rho = spearman_columns(pred.data, R.data)
    return EvaluationReport(rho, R.channel_names, _resolve_subset(R.channel_names, channels),
                            subject, scheme, model.lam)


def select_lambda(
    train: tuple[LaggedDesignMatrix, TimeSeries],
    validation: tuple[LaggedDesignMatrix, TimeSeries],
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    *,
    channels: Iterable[str] | None = None,
) -> tuple[float, dict[float, float]]:
    """Pick the grid value with the best mean validation Spearman.

    Ties go to the smallest lambda. Returns the winner and the full
    ``{lambda: mean rho}`` table.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    S_tr, R_tr = train
    S_va, R_va = validation
    subset = _resolve_subset(R_va.channel_names, channels)
    idx = [R_va.channel_names.index(c) for c in subset]
    gram = S_tr.data.T @ S_tr.data
    cross = S_tr.data.T @ R_tr.data
    scores: dict[float, float] = {}
    for lam in grid:
        W = _solve_ridge(gram, cross, lam)
        rho = spearman_columns(S_va.data @ W[:, idx], R_va.data[:, idx])
        scores[lam] = float(np.mean(rho))
    best = max(scores.values())
    return next(lam for lam in grid if scores[lam] == best), scores


@dataclass(frozen=True)
class TrfCurves:
    """TRF weights reshaped to ``[dims, lags, channels]``."""

    values: np.ndarray
    lag_ms: np.ndarray
    dim_names: tuple[str, ...]
    channel_names: tuple[str, ...]

    def flatten(self) -> np.ndarray:
        D, L, C = self.values.shape
        return self.values.reshape(D * L, C)


def extract_trf(model: TrfModel) -> TrfCurves:
    W = np.asarray(model.weights)
    values = W.reshape(model.n_dims, model.n_lags, W.shape[1])
    return TrfCurves(values, np.asarray(model.lag_times_ms), model.dim_names, model.channel_names)


def trf_window_average(trf: TrfCurves, window_ms: tuple[float, float], dim: int | str | None = None) -> np.ndarray:
    """Mean TRF over lags whose time falls in ``[lo, hi]``.

    Returns ``[dims, channels]``, or ``[channels]`` when ``dim`` is given.
    """
    lo, hi = window_ms
    if lo > hi:
        raise ValueError("window lower bound exceeds upper bound")
    if lo > trf.lag_ms[-1] or hi < trf.lag_ms[0]:
        raise ValueError(f"window [{lo}, {hi}] ms lies outside the lag range")
    mask = (trf.lag_ms >= lo) & (trf.lag_ms <= hi)
    if not mask.any():
        raise ValueError(f"no lag falls inside [{lo}, {hi}] ms")
    avg = trf.values[:, mask, :].mean(axis=1)
    if dim is None:
        return avg
    if isinstance(dim, str):
        dim = trf.dim_names.index(dim)
    return avg[dim]


def channel_correlation_map(reports: Sequence[EvaluationReport]) -> np.ndarray:
    """Per-channel mean of Spearman correlations across subjects."""
    if not reports:
        raise ValueError("no reports given")
    names = reports[0].channel_names
    for r in reports[1:]:
        if r.channel_names != names:
            raise ValueError("reports do not share the same channel set")
    return np.mean(np.stack([r.rho for r in reports]), axis=0)


# -- CSV exports ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_trf_csv(trf: TrfCurves, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim_name", "lag_ms", "channel", "weight"])
        for d, dname in enumerate(trf.dim_names):
            for l, lag in enumerate(trf.lag_ms):
                for c, cname in enumerate(trf.channel_names):
                    w.writerow([dname, _fmt(lag), cname, _fmt(trf.values[d, l, c])])
    return path


def read_trf_csv(path: str | Path) -> TrfCurves:
    rows = list(csv.DictReader(Path(path).open(newline="")))
    dims = list(dict.fromkeys(r["dim_name"] for r in rows))
    lags = list(dict.fromkeys(float(r["lag_ms"]) for r in rows))
    chans = list(dict.fromkeys(r["channel"] for r in rows))
    values = np.array([float(r["weight"]) for r in rows]).reshape(len(dims), len(lags), len(chans))
    return TrfCurves(values, np.array(lags), tuple(dims), tuple(chans))


def write_correlation_csv(reports: Sequence[EvaluationReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "scheme", "channel", "rho", "lambda"])
        for r in reports:
            for cname, rho in zip(r.channel_names, r.rho):
                w.writerow([r.subject, r.scheme, cname, _fmt(rho), _fmt(r.lam)])
    return path


def write_topography_csv(
    values: np.ndarray, channel_names: Sequence[str], window_ms: tuple[float, float] | None, path: str | Path
) -> Path:
    """Per-channel scalar map for external plotting. ``window_ms=None`` leaves the window blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = ("", "") if window_ms is None else (_fmt(window_ms[0]), _fmt(window_ms[1]))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "value", "window_lo_ms", "window_hi_ms"])
        for cname, v in zip(channel_names, values):
            w.writerow([cname, _fmt(v), lo, hi])
    return path


# -- per-recording protocol ---------------------------------------------------------

def split_design(features, eeg: TimeSeries, window_ms: float = DEFAULT_WINDOW_MS,
                 normalize: bool = True) -> dict[str, tuple[LaggedDesignMatrix, TimeSeries]]:
    """Cut a recording 40/10/10/40 and lag each piece on its own.

    EEG is z-scored with statistics of the two training pieces. The training
    entry stacks both pieces; the lags never reach across a cut.
    """
    data = np.asarray(features.data)
    if data.shape[0] != eeg.n_samples or float(features.fs) != eeg.fs:
        raise ValueError("features and EEG must share sampling rate and length")
    b = split_boundaries(eeg.n_samples)
    if normalize:
        eeg = apply_normalization(eeg, fit_normalization([eeg.slice(b[0], b[1]), eeg.slice(b[3], b[4])]))
    names = tuple(getattr(features, "dim_names", ()))

    def piece(lo, hi):
        part = SimpleNamespace(data=data[lo:hi], fs=features.fs, dim_names=names)
        return build_lagged_matrix(part, window_ms), eeg.slice(lo, hi)

    (s0, r0), (s3, r3) = piece(b[0], b[1]), piece(b[3], b[4])
    return {"train": (stack_designs([s0, s3]), stack_series([r0, r3])),
            "validation": piece(b[1], b[2]), "test": piece(b[2], b[3])}


@dataclass(frozen=True)
class SubjectFit:
    model: TrfModel
    report: EvaluationReport
    validation_scores: dict[float, float]


def fit_subject(
    features,
    eeg: TimeSeries,
    *,
    window_ms: float = DEFAULT_WINDOW_MS,
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    channels: Iterable[str] | None = None,
    subject: str = "",
    scheme: str = "",
) -> SubjectFit:
    """Select lambda on validation, fit on training, report Spearman on test."""
    parts = split_design(features, eeg, window_ms)
    lam, scores = select_lambda(parts["train"], parts["validation"], grid, channels=channels)
    model = ridge_fit(*parts["train"], lam)
    report = evaluate(model, *parts["test"], channels=channels, subject=subject, scheme=scheme)
    return SubjectFit(model, report, scores)
