"""Central finite-difference verification of the analytic gradient."""
from __future__ import annotations

import numpy as np

from .model import PARAM_GROUPS, DualPathModel, ModelParams


def gradient_check(
    model: DualPathModel,
    params: ModelParams,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    *,
    eps: float = 1e-4,
    per_tensor: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error per parameter group, computed in float64.

    The error of one coordinate is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``; ``floor`` keeps coordinates whose true gradient is
    ~0 from dividing round-off by round-off. ``per_tensor`` samples that many
    coordinates from each tensor instead of checking all of them.
    """
    p = params.astype(np.float64)
    eeg, sa, sb = (np.asarray(a, dtype=np.float64) for a in batch[:3])
    y = np.asarray(batch[3])
    _, analytic = model.loss_and_grad(p, eeg, sa, sb, y)
    rng = np.random.default_rng(seed)
    result = {}
    for group, names in PARAM_GROUPS.items():
        worst = 0.0
        for name in names:
            lo, hi = p.offsets[name]
            idx = np.arange(lo, hi)
            if per_tensor is not None and idx.size > per_tensor:
                idx = np.sort(rng.choice(idx, per_tensor, replace=False))
            for k in idx:
                old = p.flat[k]
                p.flat[k] = old + eps
                up = model.loss(p, eeg, sa, sb, y)
                p.flat[k] = old - eps
                down = model.loss(p, eeg, sa, sb, y)
                p.flat[k] = old
                numeric = (up - down) / (2 * eps)
                err = abs(analytic[k] - numeric) / max(abs(analytic[k]), abs(numeric), floor)
                worst = max(worst, err)
        result[group] = worst
    return result
