"""Dual-path similarity network for the match-mismatch task, in plain numpy.

EEG path: a convolution spanning every channel and ``time_kernel`` samples
(stride ``time_stride``), tanh, then a per-frame linear projection.
Speech path, shared by both candidates: the same time-strided convolution
over feature dimensions, tanh, then an LSTM. Each candidate is compared
with the EEG by per-frame cosine similarity; one scoring head maps each
similarity sequence to a scalar and ``p(A) = sigmoid(score_A - score_B)``.
Swapping candidates therefore gives exactly ``1 - p``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    eeg_channels: int = 64
    feature_dims: int = 3
    time_kernel: int = 9
    time_stride: int = 3
    eeg_filters: int = 64
    speech_filters: int = 64
    lstm_units: int = 64
    window_samples: int = 320
    head_hidden: int = 128

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.time_kernel > self.window_samples:
            raise ValueError("time_kernel exceeds window_samples")

    @property
    def n_frames(self) -> int:
        return (self.window_samples - self.time_kernel) // self.time_stride + 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        T, C, D = self.time_kernel, self.eeg_channels, self.feature_dims
        F, Fs, U, H = self.eeg_filters, self.speech_filters, self.lstm_units, self.head_hidden
        return {
            "eeg_conv_w": (C * T, F),
            "eeg_conv_b": (F,),
            "eeg_proj_w": (F, U),
            "eeg_proj_b": (U,),
            "speech_conv_w": (D * T, Fs),
            "speech_conv_b": (Fs,),
            "lstm_wx": (Fs, 4 * U),
            "lstm_wh": (U, 4 * U),
            "lstm_b": (4 * U,),
            "head_w": (self.n_frames, H),
            "head_b": (H,),
            "head_v": (H,),
        }

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes().values())

    def to_dict(self) -> dict:
        return asdict(self)


PARAM_GROUPS = {
    "eeg_conv": ("eeg_conv_w", "eeg_conv_b", "eeg_proj_w", "eeg_proj_b"),
    "speech_conv": ("speech_conv_w", "speech_conv_b"),
    "lstm": ("lstm_wx", "lstm_wh", "lstm_b"),
    "head": ("head_w", "head_b", "head_v"),
}


class ModelParams:
    """All weights in one flat vector, exposed as named reshaped views."""

    def __init__(self, config: ModelConfig, flat: np.ndarray):
        flat = np.ascontiguousarray(flat)
        if flat.shape != (config.n_params,):
            raise ValueError(f"expected {config.n_params} parameters, got {flat.shape}")
        self.config = config
        self.flat = flat
        self.offsets: dict[str, tuple[int, int]] = {}
        self.tensors: dict[str, np.ndarray] = {}
        pos = 0
        for name, shape in config.shapes().items():
            size = math.prod(shape)
            self.offsets[name] = (pos, pos + size)
            self.tensors[name] = flat[pos:pos + size].reshape(shape)
            pos += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.flat.astype(dtype))

    def group_slice(self, group: str) -> np.ndarray:
        """Flat indices belonging to a parameter group."""
        return np.concatenate([np.arange(*self.offsets[n]) for n in PARAM_GROUPS[group]])


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform fan-in initialization; zero biases except a forget-gate bias of 1.

    The head's output vector starts at zero, so a fresh model scores both
    candidates equally (p = 0.5).
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(config, np.zeros(config.n_params, dtype=np.float64))
    for name, shape in config.shapes().items():
        if name.endswith("_w") or name in ("lstm_wx", "lstm_wh"):
            bound = 1.0 / math.sqrt(shape[0])
            params[name][...] = rng.uniform(-bound, bound, size=shape)
    U = config.lstm_units
    params["lstm_b"][U:2 * U] = 1.0
    return params.astype(dtype)


# -- building blocks -------------------------------------------------------------

def frames(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """[B, W, K] -> [B, N, K * kernel] strided time windows (channel-major)."""
    win = sliding_window_view(x, kernel, axis=1)[:, ::stride]  # [B, N, K, kernel]
    return win.reshape(win.shape[0], win.shape[1], -1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cosine_per_frame(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine similarity along the last axis; frames where either vector is zero give 0."""
    c, _ = _cosine_fwd(x, y)
    return c


def _cosine_fwd(x, y):
    nx = np.sqrt((x * x).sum(-1))
    ny = np.sqrt((y * y).sum(-1))
    denom = nx * ny
    valid = denom > 0
    safe = np.where(valid, denom, 1.0)
    c = np.where(valid, (x * y).sum(-1) / safe, 0.0)
    return c, (nx, ny, safe, valid)


def _cosine_bwd(x, y, c, cache, dc):
    nx, ny, safe, valid = cache
    dc = np.where(valid, dc, 0.0)[..., None]
    nx2 = np.where(valid, nx * nx, 1.0)[..., None]
    ny2 = np.where(valid, ny * ny, 1.0)[..., None]
    cc = c[..., None]
    dx = dc * (y / safe[..., None] - cc * x / nx2)
    dy = dc * (x / safe[..., None] - cc * y / ny2)
    return dx, dy


def lstm_forward(xz: np.ndarray, wh: np.ndarray, U: int):
    """Run the LSTM given precomputed input projections ``xz`` [B, N, 4U] (bias included)."""
    B, N, _ = xz.shape
    h = np.zeros((B, U), dtype=xz.dtype)
    c = np.zeros((B, U), dtype=xz.dtype)
    hs = np.empty((B, N, U), dtype=xz.dtype)
    cache = np.empty((N, 6, B, U), dtype=xz.dtype)  # i, f, g, o, c, tanh(c)
    for t in range(N):
        z = xz[:, t] + h @ wh
        i = _sigmoid(z[:, :U])
        f = _sigmoid(z[:, U:2 * U])
        g = np.tanh(z[:, 2 * U:3 * U])
        o = _sigmoid(z[:, 3 * U:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache[t] = (i, f, g, o, c, tc)
    return hs, cache


def lstm_backward(dhs: np.ndarray, hs: np.ndarray, cache: np.ndarray, wh: np.ndarray):
    """Backprop through time. Returns (d xz [B, N, 4U], d wh)."""
    B, N, U = dhs.shape
    dxz = np.empty((B, N, 4 * U), dtype=dhs.dtype)
    dwh = np.zeros_like(wh)
    dh_next = np.zeros((B, U), dtype=dhs.dtype)
    dc_next = np.zeros((B, U), dtype=dhs.dtype)
    zeros = np.zeros((B, U), dtype=dhs.dtype)
    for t in range(N - 1, -1, -1):
        i, f, g, o, c, tc = cache[t]
        c_prev = cache[t - 1, 4] if t > 0 else zeros
        h_prev = hs[:, t - 1] if t > 0 else zeros
        dh = dhs[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dxz[:, t]
        dz[:, :U] = dc * g * i * (1.0 - i)
        dz[:, U:2 * U] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * U:3 * U] = dc * i * (1.0 - g * g)
        dz[:, 3 * U:] = dh * tc * o * (1.0 - o)
        dwh += h_prev.T @ dz
        dh_next = dz @ wh.T
        dc_next = dc * f
    return dxz, dwh


class DualPathModel:
    """Forward and exact backward passes of the match-mismatch network."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # EEG path ------------------------------------------------------------------
    def _eeg_forward(self, p: ModelParams, eeg):
        cfg = self.config
        fe = frames(eeg, cfg.time_kernel, cfg.time_stride)
        he = np.tanh(fe @ p["eeg_conv_w"] + p["eeg_conv_b"])
        ze = he @ p["eeg_proj_w"] + p["eeg_proj_b"]
        return ze, (fe, he)

    def _eeg_backward(self, p, cache, dze, g):
        fe, he = cache
        B, N, _ = dze.shape
        g["eeg_proj_w"] += he.reshape(B * N, -1).T @ dze.reshape(B * N, -1)
        g["eeg_proj_b"] += dze.sum((0, 1))
        dae = (dze @ p["eeg_proj_w"].T) * (1.0 - he * he)
        g["eeg_conv_w"] += fe.reshape(B * N, -1).T @ dae.reshape(B * N, -1)
        g["eeg_conv_b"] += dae.sum((0, 1))

    # speech path -----------------------------------------------------------------
    def _speech_forward(self, p: ModelParams, speech):
        cfg = self.config
        fs_ = frames(speech, cfg.time_kernel, cfg.time_stride)
        hs_in = np.tanh(fs_ @ p["speech_conv_w"] + p["speech_conv_b"])
        xz = hs_in @ p["lstm_wx"] + p["lstm_b"]
        out, lcache = lstm_forward(xz, p["lstm_wh"], cfg.lstm_units)
        return out, (fs_, hs_in, out, lcache)

    def _speech_backward(self, p, cache, dout, g):
        fs_, hs_in, out, lcache = cache
        B, N, _ = dout.shape
        dxz, dwh = lstm_backward(dout, out, lcache, p["lstm_wh"])
        g["lstm_wh"] += dwh
        g["lstm_b"] += dxz.sum((0, 1))
        g["lstm_wx"] += hs_in.reshape(B * N, -1).T @ dxz.reshape(B * N, -1)
        da = (dxz @ p["lstm_wx"].T) * (1.0 - hs_in * hs_in)
        g["speech_conv_w"] += fs_.reshape(B * N, -1).T @ da.reshape(B * N, -1)
        g["speech_conv_b"] += da.sum((0, 1))

    # head --------------------------------------------------------------------------
    def _head_forward(self, p, sim):
        hh = np.tanh(sim @ p["head_w"] + p["head_b"])
        return hh @ p["head_v"], hh

    def _head_backward(self, p, sim, hh, dscore, g):
        g["head_v"] += hh.T @ dscore
        dpre = (dscore[:, None] * p["head_v"]) * (1.0 - hh * hh)
        g["head_w"] += sim.T @ dpre
        g["head_b"] += dpre.sum(0)
        return dpre @ p["head_w"].T

    # public API --------------------------------------------------------------------
    def _check_shapes(self, eeg, sa, sb):
        cfg = self.config
        W = cfg.window_samples
        if eeg.ndim != 3 or eeg.shape[1:] != (W, cfg.eeg_channels):
            raise ValueError(f"EEG batch must be [B, {W}, {cfg.eeg_channels}], got {eeg.shape}")
        for s in (sa, sb):
            if s.shape != (eeg.shape[0], W, cfg.feature_dims):
                raise ValueError(f"speech batch must be [{eeg.shape[0]}, {W}, {cfg.feature_dims}], got {s.shape}")

    def _forward(self, p: ModelParams, eeg, sa, sb):
        self._check_shapes(eeg, sa, sb)
        ze, ecache = self._eeg_forward(p, eeg)
        # each candidate runs the shared path on its own so A and B are computed identically
        ya, acache = self._speech_forward(p, sa)
        yb, bcache = self._speech_forward(p, sb)
        # checked here because the cosine would mask NaN frames as zero similarity
        for name, act in (("eeg embedding", ze), ("speech A embedding", ya), ("speech B embedding", yb)):
            if not np.all(np.isfinite(act)):
                raise FloatingPointError(f"non-finite activation in {name}")
        sim_a, cos_a = _cosine_fwd(ze, ya)
        sim_b, cos_b = _cosine_fwd(ze, yb)
        score_a, hh_a = self._head_forward(p, sim_a)
        score_b, hh_b = self._head_forward(p, sim_b)
        logit = score_a - score_b
        if not np.all(np.isfinite(logit)):
            raise FloatingPointError("non-finite activation in forward pass")
        cache = (ze, ecache, ya, acache, yb, bcache, sim_a, cos_a, sim_b, cos_b, hh_a, hh_b)
        return logit, cache

    def forward(self, params: ModelParams, eeg, speech_a, speech_b) -> np.ndarray:
        """Probability that candidate A is the matched one. Accepts single examples or batches."""
        single = np.ndim(eeg) == 2
        if single:
            eeg, speech_a, speech_b = eeg[None], speech_a[None], speech_b[None]
        logit, _ = self._forward(params, eeg, speech_a, speech_b)
        p = _sigmoid(logit)
        return p[0] if single else p

    def similarities(self, params: ModelParams, eeg, speech_a, speech_b):
        _, cache = self._forward(params, eeg, speech_a, speech_b)
        return cache[6], cache[8]

    def loss(self, params: ModelParams, eeg, speech_a, speech_b, labels) -> float:
        logit, _ = self._forward(params, eeg, speech_a, speech_b)
        return float(np.mean(bce_from_logit(logit, labels)))

    def loss_and_grad(self, params: ModelParams, eeg, speech_a, speech_b, labels):
        """Mean binary cross-entropy over the batch and its gradient as a flat vector.

        ``labels`` is 1 where candidate A is matched, 0 where B is.
        """
        labels = np.asarray(labels)
        logit, cache = self._forward(params, eeg, speech_a, speech_b)
        (ze, ecache, ya, acache, yb, bcache, sim_a, cos_a, sim_b, cos_b, hh_a, hh_b) = cache
        B = logit.shape[0]
        losses = bce_from_logit(logit, labels)
        p = _sigmoid(logit)
        clamped = (p < PROB_CLAMP) | (p > 1 - PROB_CLAMP)
        dlogit = np.where(clamped, 0.0, p - labels).astype(logit.dtype) / B

        grad = ModelParams(self.config, np.zeros_like(params.flat))
        g = grad.tensors
        dsim_a = self._head_backward(params, sim_a, hh_a, dlogit, g)
        dsim_b = self._head_backward(params, sim_b, hh_b, -dlogit, g)
        dze_a, dya = _cosine_bwd(ze, ya, sim_a, cos_a, dsim_a)
        dze_b, dyb = _cosine_bwd(ze, yb, sim_b, cos_b, dsim_b)
        self._speech_backward(params, acache, dya, g)
        self._speech_backward(params, bcache, dyb, g)
        self._eeg_backward(params, ecache, dze_a + dze_b, g)
        for name, t in g.items():
            if not np.all(np.isfinite(t)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        return float(np.mean(losses)), grad.flat


def bce_from_logit(logit: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    # float64 so the reported loss is exact even when training in float32
    p = np.clip(_sigmoid(np.asarray(logit, dtype=np.float64)), PROB_CLAMP, 1 - PROB_CLAMP)
    return np.where(np.asarray(labels) == 1, -np.log(p), -np.log1p(-p))


def bce(p, label_is_a: bool) -> float:
    """Loss for one probability ``p = p(A)``."""
    p = min(max(float(p), PROB_CLAMP), 1 - PROB_CLAMP)
    return -math.log(p) if label_is_a else -math.log1p(-p)
