"""SGD with momentum, weight decay, and polynomial learning-rate decay.

The defaults are the training recipe used throughout this project:
lr 0.01, momentum 0.9, weight decay 0.0005, batch size 256, five epochs,
linear (power 1) decay of the learning rate to zero over the planned run.
Weight decay is skipped for biases and PReLU slopes. The momentum update
is the classic velocity form:

    g <- grad + weight_decay * param        (decayed tensors only)
    v <- momentum * v - lr * multiplier * g
    param <- param + v

Training is strictly deterministic given (seed, config, data): batches are
shuffled by a seeded generator and the last partial batch is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Example, pack_examples
from .errors import ConfigError, RangeError, ShapeError, TargetError
from .heads import Model
from .nn import Param

Array = np.ndarray


@dataclass
class SgdConfig:
    """Hyperparameters of one training run."""

    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 256
    max_iters: int | None = None  # planned total steps; derived by train_epochs
    poly_power: float = 1.0
    lr_multipliers: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.base_lr <= 0.0:
            raise ConfigError("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.poly_power < 0.0:
            raise ConfigError("poly_power must be >= 0")

    def multiplier(self, group: str) -> float:
        return self.lr_multipliers.get(group, 1.0)


def poly_lr(cfg: SgdConfig, iteration: int) -> float:
    """Polynomially decayed learning rate at a given step.

    lr = base_lr * (1 - iteration / max_iters) ** poly_power, reaching
    exactly zero at iteration == max_iters.
    """
    if cfg.max_iters is None:
        raise ConfigError("poly_lr requires max_iters to be set")
    if iteration < 0 or iteration > cfg.max_iters:
        raise RangeError(
            f"iteration {iteration} outside [0, {cfg.max_iters}]"
        )
    return cfg.base_lr * (1.0 - iteration / cfg.max_iters) ** cfg.poly_power


class SgdState:
    """Velocity buffers (keyed by parameter name) and the step counter."""

    def __init__(self, params: list[Param]):
        self.velocity = {p.name: np.zeros_like(p.value) for p in params}
        self.iteration = 0


def sgd_step(state: SgdState, params: list[Param], cfg: SgdConfig) -> None:
    """Apply one momentum update to every parameter, in place."""
    lr = poly_lr(cfg, state.iteration)
    for p in params:
        if p.grad.shape != p.value.shape:
            raise ShapeError(
                f"{p.name}: gradient shape {p.grad.shape} != value shape {p.value.shape}"
            )
        grad = p.grad
        if cfg.weight_decay != 0.0 and p.decay:
            grad = grad + cfg.weight_decay * p.value
        v = state.velocity[p.name]
        v *= cfg.momentum
        v -= lr * cfg.multiplier(p.group) * grad
        p.value += v
    state.iteration += 1


@dataclass
class LogRow:
    """One training-log record."""

    iteration: int
    epoch: int
    lr: float
    batch_loss: float

    def as_line(self) -> str:
        return f"{self.iteration},{self.epoch},{self.lr!r},{self.batch_loss!r}"


@dataclass
class TrainLog:
    """Per-batch loss trace of one run."""

    rows: list[LogRow] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        sums: dict[int, list[float]] = {}
        for row in self.rows:
            sums.setdefault(row.epoch, []).append(row.batch_loss)
        return [float(np.mean(sums[e])) for e in sorted(sums)]

    def lines(self) -> list[str]:
        return [row.as_line() for row in self.rows]


def train_epochs(
    model: Model,
    examples: list[Example],
    cfg: SgdConfig,
    epochs: int,
    seed: int,
) -> TrainLog:
    """Run seeded mini-batch SGD for a number of epochs.

    Every training label must be a seen pair. The decay horizon is the
    whole planned run: max_iters = epochs * ceil(n / batch_size) unless the
    config pins it explicitly. Returns the per-batch loss log; the model is
    updated in place.
    """
    cfg.validate()
    if epochs < 0:
        raise RangeError(f"epochs must be >= 0, got {epochs}")
    log = TrainLog()
    if epochs == 0:
        return log
    if not examples:
        raise ConfigError("training requires a nonempty dataset")
    for ex in examples:
        if (ex.adj_id, ex.noun_id) not in model.vocab.seen_pairs:
            raise TargetError(
                f"training example {ex.id!r} labeled with non-seen pair "
                f"({ex.adj_id}, {ex.noun_id})"
            )
    features, adj_ids, noun_ids = pack_examples(examples)
    n = len(examples)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    if cfg.max_iters is None:
        cfg = replace(cfg, max_iters=epochs * batches_per_epoch)
    params = model.parameters()
    state = SgdState(params)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            loss = model.accumulate_batch(
                features[batch], adj_ids[batch], noun_ids[batch]
            )
            step = state.iteration
            lr = poly_lr(cfg, step)
            sgd_step(state, params, cfg)
            log.rows.append(LogRow(step, epoch, lr, loss))
    return log
