"""Dice loss, Adam, cosine-annealed schedule, early stopping, training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Sample, SplitSpec, balanced_batches
from .model import FilmUNet, one_hot_batch
from .tensor import Tensor


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    initial_lr: float = 0.001
    max_epochs: int = 200
    patience: int = 50
    epsilon: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dice_smooth: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.epsilon < 0 or self.initial_lr <= 0:
            raise ValueError(f"invalid training config: {self}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_valid_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improve: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss over the whole batch jointly."""
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss: shapes {pred.shape} and {target.shape} differ")
    num = 2.0 * T.reduce_sum(T.mul(pred, target)) + smooth
    den = T.reduce_sum(pred) + T.reduce_sum(target) + smooth
    return 1.0 - num / den


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Single descending cosine arc from initial_lr at epoch 0 to 0 at max_epochs."""
    if not 0 <= epoch <= config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs}]")
    return 0.5 * config.initial_lr * (1.0 + math.cos(math.pi * epoch / config.max_epochs))


def adam_step(params: dict[str, Tensor], state: TrainState, lr: float, config: TrainConfig):
    """Bias-corrected Adam update in place; parameters without grads are untouched."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if np.isnan(g).any():
            raise DivergenceError(f"NaN gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)


def early_stop(valid_loss: float, state: TrainState, config: TrainConfig) -> bool:
    """Update plateau bookkeeping; True means stop.

    Improvement requires valid_loss < best - epsilon; the counter resets on
    improvement and training stops once it reaches the patience.
    """
    if valid_loss < state.best_valid_loss - config.epsilon:
        state.best_valid_loss = valid_loss
        state.best_epoch = state.epoch
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
    return state.epochs_since_improve >= config.patience


def _metadata_for(batch: list[Sample], model: FilmUNet, metadata_mode: str, constant_class: int) -> Tensor:
    n_classes = model.config.n_metadata_classes
    if metadata_mode == "true":
        return one_hot_batch([s.class_id for s in batch], n_classes)
    if metadata_mode == "constant":
        # the no-metadata control: every sample gets the same input vector
        return one_hot_batch([constant_class] * len(batch), n_classes)
    raise ValueError(f"unknown metadata_mode {metadata_mode!r}")


def _stack_images(batch: list[Sample]) -> Tensor:
    return Tensor(np.stack([s.image for s in batch]))


def _stack_masks(batch: list[Sample]) -> Tensor:
    return Tensor(np.stack([s.mask for s in batch]))


def evaluate_loss(model: FilmUNet, samples: list[Sample], config: TrainConfig,
                  metadata_mode: str = "true", constant_class: int = 0) -> float:
    """Joint soft-Dice loss over the whole sample set (chunked forward, no graph)."""
    if not samples:
        raise ValueError("evaluate_loss: empty sample set")
    inter = 0.0
    pred_sum = 0.0
    target_sum = 0.0
    with T.no_grad():
        for i in range(0, len(samples), 16):
            chunk = samples[i:i + 16]
            md = _metadata_for(chunk, model, metadata_mode, constant_class)
            pred = model.forward(_stack_images(chunk), md).data
            masks = np.stack([s.mask for s in chunk])
            inter += float(np.sum(pred * masks))
            pred_sum += float(np.sum(pred))
            target_sum += float(np.sum(masks))
    s = config.dice_smooth
    return 1.0 - (2.0 * inter + s) / (pred_sum + target_sum + s)


@dataclass
class TrainResult:
    model: FilmUNet
    curves: list[tuple[int, float, float, float]]  # (epoch, train_loss, valid_loss, lr)
    best_epoch: int
    best_valid_loss: float
    stopped_epoch: int


def train(model: FilmUNet, samples: list[Sample], split: SplitSpec, config: TrainConfig,
          metadata_mode: str = "true", constant_class: int = 0) -> TrainResult:
    """Train in place and return the best-validation checkpoint plus loss curves.

    Fully deterministic in (model, dataset, split, config): batch order is
    drawn from a per-epoch stream derived from config.seed.
    """
    by_id = {s.subject_id: s for s in samples}
    train_set = [by_id[i] for i in split.train]
    valid_set = [by_id[i] for i in split.valid]
    if not train_set or not valid_set:
        raise ValueError("train: empty train or valid split")

    params = model.parameters()
    state = TrainState()
    best_params = model.state()
    # checkpoint selection is the strict minimum; epsilon only gates the plateau counter
    best_ckpt_loss = math.inf
    best_ckpt_epoch = -1
    curves = []
    for epoch in range(config.max_epochs):
        state.epoch = epoch
        lr = cosine_lr(epoch, config)
        batch_seed = np.random.SeedSequence([config.seed, epoch])
        epoch_losses = []
        for batch in balanced_batches(train_set, config.batch_size, seed=batch_seed):
            md = _metadata_for(batch, model, metadata_mode, constant_class)
            pred = model.forward(_stack_images(batch), md)
            loss = dice_loss(pred, _stack_masks(batch), smooth=config.dice_smooth)
            loss_val = loss.item()
            if math.isnan(loss_val):
                raise DivergenceError(f"training loss became NaN at epoch {epoch}")
            for p in params.values():
                p.zero_grad()
            T.backward(loss)
            adam_step(params, state, lr, config)
            epoch_losses.append(loss_val)
        valid_loss = evaluate_loss(model, valid_set, config, metadata_mode, constant_class)
        if math.isnan(valid_loss):
            raise DivergenceError(f"validation loss became NaN at epoch {epoch}")
        curves.append((epoch, float(np.mean(epoch_losses)), valid_loss, lr))
        if valid_loss < best_ckpt_loss:
            best_ckpt_loss = valid_loss
            best_ckpt_epoch = epoch
            best_params = model.state()
        if early_stop(valid_loss, state, config):
            break
    model.load_state(best_params)
    return TrainResult(model, curves, best_ckpt_epoch, best_ckpt_loss, curves[-1][0])


def write_curves_csv(curves, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "valid_loss", "lr"])
        for epoch, tr, va, lr in curves:
            writer.writerow([epoch, repr(float(tr)), repr(float(va)), repr(float(lr))])
