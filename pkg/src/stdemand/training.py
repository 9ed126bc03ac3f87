"""Masked-MAE training with AdamW, cosine decay and early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .clustering import ClusterHierarchy
from .container import read_container, write_container
from .evaluation import DEFAULT_THRESHOLD, thresholded_metrics
from .model import DemandForecaster, ModelConfig
from .pipeline import Dataset, ForecastBatch, Normalizer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    patience: int = 15
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["betas"] = list(self.betas)
        return doc


def masked_mae_loss(pred, target, threshold: float = DEFAULT_THRESHOLD) -> dc.DiffArray:
    """Mean absolute error over cells with ``target >= threshold``.

    Falls back to the plain MAE when no cell qualifies.
    """
    pred = dc.as_diff(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = target >= threshold
    if not mask.any():
        mask = np.ones_like(mask)
    weight = mask.astype(pred.dtype) / mask.sum()
    return (dc.abs_(pred - target) * weight).sum()


def lr_schedule(epoch: int, total_epochs: int, lr_start: float = 1e-3, lr_end: float = 1e-4) -> float:
    """Cosine interpolation from ``lr_start`` (first epoch) to ``lr_end`` (last epoch)."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return lr_start
    return lr_end + (lr_start - lr_end) * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1))) / 2.0


def adamw_update(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One AdamW update; returns ``(param, m, v)`` as new arrays.

    ``step`` is the 1-based update count used for bias correction.
    """
    b1, b2 = betas
    param = param - lr * weight_decay * param
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    """Decoupled weight-decay Adam over a named parameter registry."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            p.data, self.m[name], self.v[name] = adamw_update(
                p.data, g, self.m[name], self.v[name], self.step_count, lr,
                self.betas, self.eps, self.weight_decay)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = dc.parameters_grad_norm(params.values())
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, model: DemandForecaster, normalizer: Normalizer, hierarchy: ClusterHierarchy | None,
                    extra: dict | None = None) -> None:
    header = {
        "kind": "checkpoint",
        "model_config": model.config.to_dict(),
        "n_regions": model.n_regions,
        "normalizer": {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()},
        "hierarchy": hierarchy.to_dict() if hierarchy is not None else None,
    }
    if extra:
        header.update(extra)
    write_container(path, header, model.params.state_dict())


def load_checkpoint(path):
    """Rebuild ``(model, normalizer, header)`` from a checkpoint file."""
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    config = ModelConfig(**header["model_config"])
    hierarchy = ClusterHierarchy.from_dict(header["hierarchy"]) if header.get("hierarchy") else None
    maps = hierarchy.cluster_maps if hierarchy is not None else []
    model = DemandForecaster(config, header["n_regions"], maps)
    model.params.load_state_dict(arrays)
    norm = Normalizer(np.asarray(header["normalizer"]["mean"]), np.asarray(header["normalizer"]["std"]))
    return model, norm, header


# -- training loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf
    best_state: dict | None = None
    stopped_early: bool = False


def _denormalize(pred, normalizer: Normalizer):
    if isinstance(pred, dc.DiffArray):
        return pred * normalizer.std.astype(pred.dtype) + normalizer.mean.astype(pred.dtype)
    return normalizer.denormalize(pred)


def evaluate(model: DemandForecaster, batch: ForecastBatch, normalizer: Normalizer,
             threshold: float = DEFAULT_THRESHOLD, batch_size: int = 256):
    """Raw-scale predictions and their thresholded metrics."""
    pred = _denormalize(model.predict(batch.inputs, batch.input_time, batch_size), normalizer)
    return pred, thresholded_metrics(pred, batch.targets, threshold)


def train(model: DemandForecaster, data: Dataset, config: TrainConfig, checkpoint_path=None,
          history_path=None, hierarchy: ClusterHierarchy | None = None) -> TrainResult:
    """Fit ``model`` on ``data.train`` and keep the best validation checkpoint.

    The model ends up holding the best parameters.  History lines are
    ``{epoch, lr, train_loss, val_mae, val_rmse, val_mape}``.
    """
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.params, config.betas, config.eps, config.weight_decay)
    result = TrainResult()
    history_fh = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        history_fh = open(history_path, "w")
    norm = data.normalizer
    n_train = len(data.train)
    bad_epochs = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config.epochs, config.lr_start, config.lr_end)
            order = rng.permutation(n_train)
            total, seen = 0.0, 0
            for start in range(0, n_train, config.batch_size):
                batch = data.train.subset(order[start:start + config.batch_size])
                model.params.zero_grad()
                with dc.Tape():
                    try:
                        pred = model.forward(batch.inputs, batch.input_time)
                    except FloatingPointError as exc:
                        raise TrainingError(f"non-finite activations at epoch {epoch}: {exc}") from None
                    loss = masked_mae_loss(_denormalize(pred, norm), batch.targets, config.threshold)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingError(f"non-finite training loss at epoch {epoch}")
                    dc.backward(loss)
                clip_grad_norm(model.params, config.clip_norm)
                opt.step(lr)
                total += value * len(batch)
                seen += len(batch)
            _, report = evaluate(model, data.val, norm, config.threshold)
            entry = {"epoch": epoch, "lr": lr, "train_loss": total / seen,
                     "val_mae": report.mae, "val_rmse": report.rmse, "val_mape": report.mape}
            result.history.append(entry)
            if history_fh is not None:
                history_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                history_fh.flush()
            log.info("epoch %d lr %.2e train %.4f val_mae %s", epoch, lr, entry["train_loss"], report.mae)
            val = report.mae if report.mae is not None else entry["train_loss"]
            if val < result.best_val_mae:
                result.best_val_mae, result.best_epoch = val, epoch
                result.best_state = model.params.state_dict()
                bad_epochs = 0
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, norm, hierarchy,
                                    {"train_config": config.to_dict(), "epoch": epoch})
            else:
                bad_epochs += 1
                if bad_epochs > config.patience:
                    result.stopped_early = True
                    break
    finally:
        if history_fh is not None:
            history_fh.close()
    if result.best_state is not None:
        model.params.load_state_dict(result.best_state)
    return result
