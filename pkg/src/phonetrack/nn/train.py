"""ADAM optimisation, early-stopped training loop and checkpoint I/O."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .model import DualPathModel, ModelConfig, ModelParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    patience: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.max_epochs > 0 and not self.patience < self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid ADAM hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, flat: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(flat), np.zeros_like(flat), 0)


def adam_step(flat: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected ADAM update, applied to ``flat`` and ``state`` in place."""
    if grad.shape != flat.shape:
        raise ValueError("gradient and parameter shapes differ")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    flat -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(flat.dtype)


class BatchSource(Protocol):
    """Anything that can hand out (eeg, speech_a, speech_b, labels) batches by index."""

    def __len__(self) -> int: ...

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]: ...


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def mean_loss(model: DualPathModel, params: ModelParams, data: BatchSource, batch_size: int) -> float:
    """Example-weighted mean loss over a whole set, in fixed batch order."""
    n = len(data)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        eeg, sa, sb, y = data.batch(idx)
        total += model.loss(params, eeg, sa, sb, y) * idx.size
    return total / n


def train_loop(
    model: DualPathModel,
    params: ModelParams,
    train_set: BatchSource,
    val_set: BatchSource,
    cfg: TrainConfig,
    *,
    include_initial: bool = False,
) -> TrainResult:
    """Train with ADAM and return the parameters of the lowest validation loss.

    Training stops after ``max_epochs`` or once validation loss has risen
    ``patience`` epochs in a row. With ``include_initial`` the starting
    parameters count as epoch 0, so the result never has a higher
    validation loss than the input (used for fine-tuning).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = params.copy()
    best = params.copy()
    best_epoch, best_val = 0, math.inf
    prev_val = math.inf
    if include_initial or cfg.max_epochs == 0:
        best_val = prev_val = mean_loss(model, params, val_set, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(params.flat)
    history: list[dict] = []
    rises = 0
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        train_total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            eeg, sa, sb, y = train_set.batch(idx)
            loss, grad = model.loss_and_grad(params, eeg, sa, sb, y)
            adam_step(params.flat, grad, state, cfg)
            train_total += loss * idx.size
        val = mean_loss(model, params, val_set, cfg.batch_size)
        history.append({"epoch": epoch, "train_loss": train_total / order.size, "val_loss": val})
        logger.info("epoch %d train %.4f val %.4f", epoch, history[-1]["train_loss"], val)
        if val < best_val:
            best, best_epoch, best_val = params.copy(), epoch, val
        rises = rises + 1 if val > prev_val else 0
        prev_val = val
        if rises >= cfg.patience:
            stopped = True
            break
    return TrainResult(best, best_epoch, best_val, history, stopped)


# -- persistence --------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, **meta) -> Path:
    """Flat little-endian float32 vector plus a JSON sidecar at ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(params.flat, dtype="<f4").tobytes())
    sidecar = {"model_config": params.config.to_dict(), "n_params": params.config.n_params}
    sidecar.update(meta)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    cfg = ModelConfig(**meta["model_config"])
    flat = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32)
    return ModelParams(cfg, flat), meta


def write_history_csv(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_loss"]))])
    return path
