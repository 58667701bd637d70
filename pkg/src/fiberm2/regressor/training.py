"""Online training loop, evaluation under noise, inference and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..beam_quality import M2Result, m2_effective, prediction_error
from ..dataset import SAMPLES_PER_EPOCH, online_batches, scaling_constant
from ..field_synthesis import STREAM_NOISE, derive_rng
from .estimator import DEFAULT_SCHEDULE, CNNM2Regressor, learning_rate
from .network import NetworkConfig

__all__ = [
    "TrainState",
    "TrainingDivergedError",
    "train",
    "evaluate",
    "predict_m2",
    "PE_THRESHOLDS",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

PE_THRESHOLDS = tuple(range(1, 11))
CHECKPOINT_VERSION = 1
_EVAL_NOISE_STREAM = 20


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainState:
    model: CNNM2Regressor
    case: int
    seed: int
    epoch: int = 0
    learning_rate: float = 0.0
    history: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.history[-1]["train_loss"] if self.history else None

    @property
    def pe_curve(self) -> np.ndarray:
        return np.array([h["mean_pe"] for h in self.history])


def _mean_pe(model, images, labels):
    return model.mean_prediction_error(images, labels)


def train(case: int, epochs: int, seed: int, eval_set=None, resolution: int = 64,
          samples_per_epoch: int = SAMPLES_PER_EPOCH, batch_size: int = 32,
          config: NetworkConfig | None = None, lr_schedule=DEFAULT_SCHEDULE,
          momentum: float = 0.0, state: TrainState | None = None, callback=None,
          label_overflow: str = "raise") -> TrainState:
    """Train on freshly generated samples every epoch.

    ``eval_set`` is an ``(images, labels)`` pair drawn from the test stream;
    its mean prediction error is appended to ``state.history`` after every
    epoch. Passing a previous ``state`` continues training from its epoch.
    The run aborts with :class:`TrainingDivergedError` when the epoch loss is
    NaN or above ten times the first epoch's loss three epochs in a row.
    """
    c = scaling_constant(case)
    if state is None:
        model = CNNM2Regressor(scaling_constant=c, config=config, batch_size=batch_size,
                               lr_schedule=lr_schedule, momentum=momentum, random_state=seed)
        state = TrainState(model=model, case=case, seed=seed)
    model = state.model
    bad = 0
    first_loss = state.history[0]["train_loss"] if state.history else None
    for _ in range(epochs):
        epoch = state.epoch
        t0 = time.perf_counter()
        total, n = 0.0, 0
        for imgs, labels in online_batches(case, seed, epoch, samples_per_epoch,
                                           batch_size=max(batch_size, 256),
                                           resolution=resolution,
                                           label_overflow=label_overflow):
            if not hasattr(model, "params_"):
                model._initialize(imgs.shape[1])
            model.epoch_ = epoch
            total += model.partial_fit(imgs, labels) * len(imgs)
            n += len(imgs)
        loss = total / n
        model.end_epoch(loss)
        model.epoch_ = epoch + 1
        entry = {"epoch": epoch, "train_loss": loss,
                 "learning_rate": learning_rate(epoch, model.lr_schedule),
                 "seconds": time.perf_counter() - t0}
        if eval_set is not None:
            entry["mean_pe"] = _mean_pe(model, *eval_set)
        state.history.append(entry)
        state.epoch = epoch + 1
        state.learning_rate = entry["learning_rate"]
        log.info("epoch %d loss %.6g pe %s (%.1fs)", epoch, loss, entry.get("mean_pe"),
                 entry["seconds"])
        if callback is not None:
            callback(state)

        if first_loss is None:
            first_loss = loss
        if not math.isfinite(loss) or loss > 10.0 * first_loss:
            bad += 1
            if bad >= 3:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}: loss {loss} "
                    f"(first epoch {first_loss})"
                )
        else:
            bad = 0
    return state


def predict_m2(model: CNNM2Regressor, image) -> M2Result:
    """Predict M^2 for one image, recording the inference wall time."""
    t0 = time.perf_counter()
    pred = model.predict(np.asarray(image)[None] if np.ndim(image) == 2 else image)
    elapsed = time.perf_counter() - t0
    if pred.shape[0] != 1:
        raise ValueError("predict_m2 takes a single image")
    return M2Result(float(pred[0, 0]), float(pred[0, 1]), "cnn", elapsed=elapsed)


def _noisy_images(images, sigma, seed, sigma_index):
    if sigma == 0:
        return images
    out = np.empty(images.shape, dtype=np.float64)
    for i, img in enumerate(images):
        rng = derive_rng(seed, STREAM_NOISE, _EVAL_NOISE_STREAM, sigma_index, i)
        noisy = np.maximum(img * (1.0 + sigma * rng.standard_normal(img.shape)), 0.0)
        out[i] = noisy / noisy.max()
    return out


def evaluate(model: CNNM2Regressor, images, labels, sigma_list=(0.0,), seed: int = 0):
    """Mean PE and cumulative PE distribution for each noise level.

    Returns one dict per sigma with ``sigma``, ``mean_pe``, ``median_pe``,
    ``p95_pe`` and ``cumulative`` (percentage of samples with PE below
    1%..10%).
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=float)
    if images.shape[0] == 0:
        raise ValueError("empty test set")
    label_eff = m2_effective(labels[:, 0], labels[:, 1])
    rows = []
    for k, sigma in enumerate(sigma_list):
        if sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        pred = model.predict(_noisy_images(images, float(sigma), seed, k))
        pe = prediction_error(m2_effective(pred[:, 0], pred[:, 1]), label_eff)
        pe = np.atleast_1d(pe)
        rows.append({
            "sigma": float(sigma),
            "mean_pe": float(np.mean(pe)),
            "median_pe": float(np.median(pe)),
            "p95_pe": float(np.percentile(pe, 95)),
            "cumulative": {t: float(100.0 * np.mean(pe < t / 100.0)) for t in PE_THRESHOLDS},
            "pe": pe,
            "pred": pred,
        })
    return rows


def _blob(params: dict) -> bytes:
    return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.values())


def save_checkpoint(state: TrainState, out_dir) -> Path:
    """Write ``checkpoint.json`` and the float32 parameter blob ``params.f32``."""
    model = state.model
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = _blob(model.params_)
    (out / "params.f32").write_bytes(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "case": state.case,
        "seed": state.seed,
        "epoch": state.epoch,
        "scaling_constant": model.scaling_constant,
        "config": model.config_.to_dict(),
        "lr_schedule": [list(x) for x in model.lr_schedule],
        "momentum": model.momentum,
        "batch_size": model.batch_size,
        "byte_order": "little",
        "dtype": "<f4",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params_.items()],
        "sha256": hashlib.sha256(blob).hexdigest(),
        "history": state.history,
    }
    (out / "checkpoint.json").write_text(json.dumps(header, indent=2), encoding="utf-8")
    return out


def load_checkpoint(path) -> TrainState:
    from ..dataset import DatasetError, UnsupportedVersionError

    root = Path(path)
    if root.is_file():
        root = root.parent
    try:
        header = json.loads((root / "checkpoint.json").read_text(encoding="utf-8"))
        blob = (root / "params.f32").read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"no model checkpoint in {root}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {header.get('format_version')!r} is not supported"
        )
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise DatasetError(f"checksum mismatch for {root / 'params.f32'}")
    config = NetworkConfig.from_dict(header["config"])
    flat = np.frombuffer(blob, dtype="<f4")
    params, pos = {}, 0
    for entry in header["params"]:
        size = int(np.prod(entry["shape"]))
        if pos + size > flat.size:
            raise DatasetError("parameter blob is truncated")
        params[entry["name"]] = flat[pos:pos + size].reshape(entry["shape"]).astype(config.dtype)
        pos += size
    if pos != flat.size:
        raise DatasetError("parameter blob has trailing data")
    model = CNNM2Regressor(
        scaling_constant=header["scaling_constant"], config=config,
        batch_size=header.get("batch_size", 32),
        lr_schedule=tuple(tuple(x) for x in header["lr_schedule"]),
        momentum=header.get("momentum", 0.0), random_state=header.get("seed", 0),
    )
    model._initialize(config.input_size)
    model.params_ = params
    model.epoch_ = header["epoch"]
    history = header.get("history", [])
    model.loss_history_ = [h["train_loss"] for h in history]
    return TrainState(model=model, case=header["case"], seed=header.get("seed", 0),
                      epoch=header["epoch"], history=history,
                      learning_rate=history[-1]["learning_rate"] if history else 0.0)
