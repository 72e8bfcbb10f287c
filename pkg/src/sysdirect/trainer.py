"""Adam training with class-balanced, length-bucketed batches and early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ClassMissingError, ConfigError, DataError, NumericError
from .models import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    balanced: bool = True
    clip_norm: float | None = 5.0
    monitor: str = "val_loss"  # or "val_acc"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.monitor not in ("val_loss", "val_acc"):
            raise ConfigError(f"unknown monitor {self.monitor!r}")


@dataclass
class Example:
    frames: np.ndarray  # normalized (T, 45)
    label: int          # 1 = system-directed
    id: str = ""


@dataclass
class Batch:
    x: np.ndarray        # (B, T_max, 45), zero padded
    lengths: np.ndarray  # valid frame counts
    labels: np.ndarray
    ids: list[str]


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainState:
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_metric: float = float("inf")
    best_epoch: int = 0
    since_improvement: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """In-place Adam update of ``params`` (name -> Tensor or array)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        data = p.data if isinstance(p, ad.Tensor) else p
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        data -= update.astype(data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def pad_batch(examples: Sequence[Example]) -> Batch:
    lengths = np.array([e.frames.shape[0] for e in examples])
    x = np.zeros((len(examples), lengths.max(), examples[0].frames.shape[1]),
                 dtype=examples[0].frames.dtype)
    for k, e in enumerate(examples):
        x[k, :lengths[k]] = e.frames
    return Batch(x, lengths, np.array([e.label for e in examples]), [e.id for e in examples])


def epoch_selection(labels: np.ndarray, rng: np.random.Generator, balanced: bool) -> np.ndarray:
    """Indices used in one epoch; balanced mode downsamples every class to the smallest."""
    if not balanced:
        return rng.permutation(len(labels))
    classes = (0, 1)
    groups = [np.flatnonzero(labels == c) for c in classes]
    for c, g in zip(classes, groups):
        if g.size == 0:
            raise ClassMissingError(f"class {c} absent from the training set; cannot balance")
    n = min(g.size for g in groups)
    return np.concatenate([rng.choice(g, size=n, replace=False) for g in groups])


def make_batches(dataset: Sequence[Example], batch_size: int, rng: np.random.Generator,
                 balanced: bool = True, bucket_factor: int = 8) -> Iterator[Batch]:
    """One epoch of padded batches.

    Selected examples are shuffled, sorted by length inside windows of
    ``bucket_factor * batch_size`` to limit padding, cut into batches, and
    the batch order is shuffled.
    """
    labels = np.array([e.label for e in dataset])
    idx = rng.permutation(epoch_selection(labels, rng, balanced))
    lengths = np.array([dataset[i].frames.shape[0] for i in idx])
    window = batch_size * bucket_factor
    ordered = []
    for start in range(0, len(idx), window):
        chunk = idx[start:start + window]
        ordered.extend(chunk[np.argsort(lengths[start:start + window], kind="stable")])
    batches = [ordered[k:k + batch_size] for k in range(0, len(ordered), batch_size)]
    for b in rng.permutation(len(batches)):
        yield pad_batch([dataset[i] for i in batches[b]])


def batch_loss(model: Model, batch: Batch) -> tuple[ad.Tensor, np.ndarray]:
    """Mean cross-entropy over the batch and the (B, 2) posteriors."""
    logits, _, _ = model.logits(batch.x.astype(model.dtype, copy=False), batch.lengths)
    onehot = np.eye(model.config.n_classes, dtype=model.dtype)[batch.labels]
    logp = ad.log_softmax(logits, axis=1)
    loss = -ad.reduce_mean(ad.reduce_sum(logp * onehot, axis=1))
    return loss, np.exp(logp.data)


def evaluate(model: Model, dataset: Sequence[Example], batch_size: int = 32) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset, no graph recorded."""
    total, correct = 0.0, 0
    order = sorted(range(len(dataset)), key=lambda i: dataset[i].frames.shape[0])
    with ad.no_grad():
        for k in range(0, len(order), batch_size):
            batch = pad_batch([dataset[i] for i in order[k:k + batch_size]])
            loss, post = batch_loss(model, batch)
            total += loss.item() * len(batch.labels)
            correct += int(np.sum(post.argmax(axis=1) == batch.labels))
    return total / len(dataset), correct / len(dataset)


def train_step(model: Model, batch: Batch, state: TrainState, config: TrainConfig,
               batch_id: int = 0) -> float:
    model.zero_grad()
    loss, _ = batch_loss(model, batch)
    loss.backward()
    params = model.named_parameters()
    grads = {n: p.grad for n, p in params.items()}
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {n} in batch {batch_id} of epoch {state.epoch}")
    if config.clip_norm is not None:
        clip_global_norm(grads, config.clip_norm)
    adam_step(params, grads, state.adam, config)
    return loss.item()


def train(model: Model, train_set: Sequence[Example], val_set: Sequence[Example],
          config: TrainConfig = TrainConfig(), log_path: str | Path | None = None,
          ) -> tuple[Model, list[dict]]:
    """Train until validation stops improving for ``patience`` epochs.

    The best-validation weights are restored before returning.  Normalization
    must already have been fitted on ``train_set`` by the caller.
    """
    if not train_set or not val_set:
        raise DataError("training and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    state = TrainState()
    best = model.state()
    history: list[dict] = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            state.epoch = epoch
            start = time.perf_counter()
            for k, batch in enumerate(make_batches(train_set, config.batch_size, rng, config.balanced)):
                train_step(model, batch, state, config, k)
            train_loss, train_acc = evaluate(model, train_set)
            val_loss, val_acc = evaluate(model, val_set)
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                      "train_acc": train_acc, "val_acc": val_acc,
                      "seconds": round(time.perf_counter() - start, 3)}
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f", epoch, train_loss, val_loss, val_acc)
            metric = val_loss if config.monitor == "val_loss" else -val_acc
            if metric < state.best_metric:
                state.best_metric, state.best_epoch = metric, epoch
                state.since_improvement = 0
                best = model.state()
            else:
                state.since_improvement += 1
                if state.since_improvement >= config.patience:
                    break
    finally:
        if sink:
            sink.close()
    model.load_state(best)
    return model, history
