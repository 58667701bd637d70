"""From-scratch convolutional regressor for M^2 prediction."""
from .estimator import DEFAULT_SCHEDULE, CNNM2Regressor, learning_rate
from .network import (
    NetworkConfig,
    NonFiniteError,
    backward,
    count_params,
    forward,
    init_params,
    loss_mse,
    reference_config,
    vgg16_config,
)
from .training import (
    TrainingDivergedError,
    TrainState,
    evaluate,
    load_checkpoint,
    predict_m2,
    save_checkpoint,
    train,
)

__all__ = [
    "CNNM2Regressor",
    "NetworkConfig",
    "NonFiniteError",
    "DEFAULT_SCHEDULE",
    "TrainState",
    "TrainingDivergedError",
    "backward",
    "count_params",
    "evaluate",
    "forward",
    "init_params",
    "learning_rate",
    "load_checkpoint",
    "loss_mse",
    "predict_m2",
    "reference_config",
    "save_checkpoint",
    "train",
    "vgg16_config",
]
