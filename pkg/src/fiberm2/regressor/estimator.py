"""scikit-learn compatible wrapper around the from-scratch CNN."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_images, check_m2_targets
from ..beam_quality import m2_effective, prediction_error
from ..dataset import scale_label
from ..field_synthesis import derive_rng
from .network import NetworkConfig, backward, forward, init_params, reference_config

__all__ = ["CNNM2Regressor", "learning_rate", "DEFAULT_SCHEDULE"]

# 0.01 for epochs 0-19, 0.001 afterwards
DEFAULT_SCHEDULE = ((0, 0.01), (20, 0.001))

_INIT_STREAM = 10
_SHUFFLE_STREAM = 11


def learning_rate(epoch: int, schedule=DEFAULT_SCHEDULE) -> float:
    """Rate of the last ``(start_epoch, lr)`` entry with ``start_epoch <= epoch``."""
    lr = None
    for start, rate in sorted(schedule):
        if epoch >= start:
            lr = rate
    if lr is None:
        raise ValueError(f"schedule {schedule} does not cover epoch {epoch}")
    return float(lr)


class CNNM2Regressor(RegressorMixin, BaseEstimator):
    """Predict ``(M_x^2, M_y^2)`` from single intensity images.

    Targets passed to :meth:`fit` are physical M^2 values; they are divided
    by ``scaling_constant`` before the MSE loss, and predictions are scaled
    back, so outputs always lie in ``(0, scaling_constant)``.

    Parameters
    ----------
    scaling_constant : float
        Label scale, 3 for the 3- and 5-mode cases, 4.5 otherwise.
    config : NetworkConfig or None
        Layer stack; ``None`` uses :func:`reference_config` sized to the input.
    epochs : int
        Passes over the data in :meth:`fit`.
    batch_size : int
    lr_schedule : sequence of (start_epoch, learning_rate)
    momentum : float
        Heavy-ball momentum; 0 gives plain SGD.
    dtype : {"float32", "float64"}
        Used when ``config`` is None.
    random_state : int
        Seeds initialisation and shuffling.
    shuffle : bool
        Reshuffle the data every epoch in :meth:`fit`.
    """

    def __init__(self, scaling_constant=3.0, config=None, epochs=1, batch_size=32,
                 lr_schedule=DEFAULT_SCHEDULE, momentum=0.0, dtype="float32",
                 random_state=0, shuffle=True):
        self.scaling_constant = scaling_constant
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.momentum = momentum
        self.dtype = dtype
        self.random_state = random_state
        self.shuffle = shuffle

    def _initialize(self, input_size):
        config = self.config
        if config is None:
            config = reference_config(input_size, dtype=self.dtype)
        elif not isinstance(config, NetworkConfig):
            config = NetworkConfig.from_dict(config)
        if config.input_size != input_size:
            raise ValueError(
                f"network expects {config.input_size}x{config.input_size} images, "
                f"got {input_size}x{input_size}"
            )
        self.config_ = config
        self.params_ = init_params(config, derive_rng(self.random_state, _INIT_STREAM))
        self.velocity_ = {k: np.zeros_like(v) for k, v in self.params_.items()}
        self.epoch_ = 0
        self.n_steps_ = 0
        self.loss_history_ = []
        self.n_features_in_ = input_size * input_size

    def _scaled_targets(self, y):
        return scale_label(y, self.scaling_constant, strict=False)

    def sgd_step(self, grads, lr=None):
        """``params <- params - lr * grad`` (with momentum when configured)."""
        if lr is None:
            lr = learning_rate(self.epoch_, self.lr_schedule)
        for k, g in grads.items():
            if self.momentum:
                v = self.velocity_[k]
                v *= self.momentum
                v += g
                step = v
            else:
                step = g
            self.params_[k] -= (lr * step).astype(self.params_[k].dtype, copy=False)
        self.n_steps_ += 1
        return self

    def _run_batches(self, X, ys, order):
        lr = learning_rate(self.epoch_, self.lr_schedule)
        total = 0.0
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            loss, grads = backward(self.config_, self.params_, X[idx], ys[idx])
            self.sgd_step(grads, lr)
            total += loss * len(idx)
        return total / len(order)

    def partial_fit(self, X, y):
        """One pass over ``(X, y)`` in the given order at the current epoch's rate.

        Does not advance the epoch counter; see :meth:`end_epoch`.
        """
        X = check_images(X)
        y = check_m2_targets(y, X.shape[0])
        if not hasattr(self, "params_"):
            self._initialize(X.shape[1])
        X = X.astype(self.config_.dtype, copy=False)
        loss = self._run_batches(X, self._scaled_targets(y), np.arange(X.shape[0]))
        return loss

    def end_epoch(self, loss=None):
        if loss is not None:
            self.loss_history_.append(float(loss))
        self.epoch_ += 1
        return self

    def fit(self, X, y):
        X = check_images(X)
        y = check_m2_targets(y, X.shape[0])
        self._initialize(X.shape[1])
        X = X.astype(self.config_.dtype, copy=False)
        ys = self._scaled_targets(y)
        for _ in range(self.epochs):
            if self.shuffle:
                order = derive_rng(self.random_state, _SHUFFLE_STREAM, self.epoch_).permutation(
                    X.shape[0])
            else:
                order = np.arange(X.shape[0])
            self.end_epoch(self._run_batches(X, ys, order))
        return self

    def predict_scaled(self, X, batch_size=256):
        check_is_fitted(self, "params_")
        X = check_images(X)
        if X.shape[1] != self.config_.input_size:
            raise ValueError(
                f"model expects {self.config_.input_size}x{self.config_.input_size} images, "
                f"got {X.shape[1]}x{X.shape[2]}"
            )
        X = X.astype(self.config_.dtype, copy=False)
        out = [forward(self.config_, self.params_, X[i:i + batch_size])
               for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out).astype(np.float64)

    def predict(self, X):
        """Physical ``(M_x^2, M_y^2)`` for every image."""
        return self.predict_scaled(X) * self.scaling_constant

    def mean_prediction_error(self, X, y):
        """Mean relative error of the effective M^2."""
        y = check_m2_targets(y)
        pred = self.predict(X)
        pe = prediction_error(m2_effective(pred[:, 0], pred[:, 1]),
                              m2_effective(y[:, 0], y[:, 1]))
        return float(np.mean(pe))
