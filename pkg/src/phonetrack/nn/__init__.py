from .gradcheck import gradient_check
from .model import (
    PARAM_GROUPS,
    DualPathModel,
    ModelConfig,
    ModelParams,
    bce,
    cosine_per_frame,
    init_params,
)
from .train import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    write_history_csv,
)

__all__ = [
    "PARAM_GROUPS", "AdamState", "DualPathModel", "ModelConfig", "ModelParams", "TrainConfig", "TrainResult",
    "adam_step", "bce", "cosine_per_frame", "gradient_check", "init_params", "load_checkpoint",
    "save_checkpoint", "train_loop", "write_history_csv",
]
