"""Mini-batch SGD loop with validation early stopping, shared by the visual and fusion models."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .nn import NonFiniteError, OptimizerState, optimizer_step

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    optimizer: str = "sgd-momentum"


class Trainable(Protocol):
    def parameters(self) -> list[np.ndarray]: ...
    def loss_and_grads(self, data: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]: ...
    def evaluate_loss(self, data: Sequence[np.ndarray]) -> float: ...
    def mark_updated(self) -> None: ...


def fit(model: Trainable, train: Sequence[np.ndarray], val: Sequence[np.ndarray], config: TrainConfig):
    """Train in place; the parameters with the best validation loss are restored at the end.

    ``train`` and ``val`` are tuples of arrays sharing their leading axis.
    Returns the per-epoch history as a list of dicts.
    """
    n = len(train[0])
    rng = np.random.default_rng(config.seed)
    state = OptimizerState(config.optimizer, config.lr, config.momentum if config.optimizer != "sgd" else 0.0,
                           config.weight_decay)
    best_val = np.inf
    best_params = [p.copy() for p in model.parameters()]
    best_epoch = -1
    history = []
    # overflow in a diverging run surfaces as a non-finite loss, checked below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total = 0.0
            try:
                for start in range(0, n, config.batch_size):
                    idx = order[start : start + config.batch_size]
                    loss, grads = model.loss_and_grads([a[idx] for a in train])
                    if not np.isfinite(loss):
                        raise TrainingDiverged(epoch)
                    optimizer_step(state, model.parameters(), grads)
                    model.mark_updated()
                    total += loss * len(idx)
                val_loss = model.evaluate_loss(val)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            if not np.isfinite(val_loss):
                raise TrainingDiverged(epoch, "non-finite validation loss")
            history.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss})
            log.debug("epoch %d train %.6g val %.6g", epoch, total / n, val_loss)
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch
                best_params = [p.copy() for p in model.parameters()]
            elif epoch - best_epoch >= config.patience:
                break
    for p, b in zip(model.parameters(), best_params):
        p[...] = b
    model.mark_updated()
    return history


def batched(fn, arrays: Sequence[np.ndarray], batch_size: int = 256):
    """Apply ``fn`` over chunks of the leading axis and concatenate the results."""
    n = len(arrays[0])
    outs = [fn(*[a[s : s + batch_size] for a in arrays]) for s in range(0, n, batch_size)]
    if isinstance(outs[0], tuple):
        return tuple(np.concatenate(parts) for parts in zip(*outs))
    return np.concatenate(outs)
