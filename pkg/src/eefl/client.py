"""Local training on one client's shard and per-exit evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import ClientUpdate
from .exceptions import ClientDivergenceError, ConfigurationError
from .heterogeneity import STREAM_SHUFFLE, make_rng
from .losses import exit_loss, compound_ee_loss
from .model import TASKS, Batch, ModelConfig, ParamSet, SubNetSpec, backward, forward, forward_with_cache


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 8
    freeze_frontend: bool = False
    task: str = "classification"
    exit_mask: tuple | None = None  # 1-based exits that enter the compound loss; None = all
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}")
        if self.exit_mask is not None:
            object.__setattr__(self, "exit_mask", tuple(sorted(int(m) for m in self.exit_mask)))
            if not self.exit_mask:
                raise ConfigurationError("exit_mask must not be empty")

    def exit_weights(self, exits: int) -> list[float]:
        if self.exit_mask is None:
            return [1.0] * exits
        return [1.0 if m in self.exit_mask else 0.0 for m in range(1, exits + 1)]


def loss_and_grad(params: ParamSet, config: ModelConfig, batch: Batch, subnet: SubNetSpec,
                  weights: Sequence[float] | None = None, freeze_frontend: bool = False):
    """Compound loss report and its gradient ParamSet for one batch."""
    logits, cache = forward_with_cache(params, config, batch, subnet)
    report, logit_grads = compound_ee_loss(logits, batch.targets, batch.task, weights)
    grad = backward(params, config, batch, subnet, logit_grads, cache=cache,
                    freeze_frontend=freeze_frontend)
    return report, grad


def sgd_epochs(params: ParamSet, config: ModelConfig, data: Batch, subnet: SubNetSpec,
               train_cfg: LocalTrainConfig, rng: np.random.Generator | None = None,
               epochs: int | None = None) -> tuple[ParamSet, list[float]]:
    """Plain mini-batch SGD on the compound loss; returns new params and per-epoch mean loss."""
    epochs = train_cfg.epochs if epochs is None else epochs
    weights = train_cfg.exit_weights(subnet.exits)
    local = params.copy()
    active = [n for n in local.subnet_names(subnet.exits)
              if not (train_cfg.freeze_frontend and n in set(local.frontend_names()))]
    history = []
    for _ in range(epochs):
        if train_cfg.shuffle and rng is not None:
            order = rng.permutation(data.num_samples)
        else:
            order = np.arange(data.num_samples)
        total, seen = 0.0, 0
        for mb in data.minibatches(train_cfg.batch_size, order):
            report, grad = loss_and_grad(local, config, mb, subnet, weights, train_cfg.freeze_frontend)
            if not np.isfinite(report.compound):
                raise ClientDivergenceError("non-finite loss during local training")
            if train_cfg.lr != 0.0:
                for name in active:
                    local.arrays[name] = local.arrays[name] - train_cfg.lr * grad.arrays[name]
            total += report.compound * mb.num_samples
            seen += mb.num_samples
        history.append(total / seen)
    if not local.is_finite():
        raise ClientDivergenceError("non-finite parameters after local training")
    return local, history


def run_client(global_params: ParamSet, config: ModelConfig, shard: Batch, subnet: SubNetSpec,
               train_cfg: LocalTrainConfig, client_id: int = 0, round_index: int = 0,
               seed: int = 0) -> ClientUpdate:
    """Train a copy of the global model on ``shard`` and return the parameter delta."""
    if shard.num_samples < 1:
        raise ConfigurationError("client shard is empty")
    subnet.check(config)
    rng = make_rng(seed, STREAM_SHUFFLE, client_id, round_index)
    local, history = sgd_epochs(global_params, config, shard, subnet, train_cfg, rng)
    pseudo = local - global_params
    pseudo.round_tag = global_params.round_tag
    return ClientUpdate(client_id, subnet, pseudo, shard.num_samples, train_cfg.epochs, history)


@dataclass
class ExitMetrics:
    exit: int
    loss: float
    error: float


def greedy_decode(logits: np.ndarray, blank: int = 0) -> list[int]:
    best = np.argmax(logits, axis=-1)
    out, prev = [], None
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _error_rate(logits: np.ndarray, batch: Batch) -> float:
    if batch.task == "classification":
        pred = np.argmax(logits.mean(axis=1), axis=-1)
        return float(np.mean(pred != batch.targets))
    errors = sum(edit_distance(greedy_decode(lg), t) for lg, t in zip(logits, batch.targets))
    length = sum(len(t) for t in batch.targets)
    # insertions can push raw token error above 1
    return min(1.0, errors / max(length, 1))


def evaluate(params: ParamSet, config: ModelConfig, eval_set: Batch,
             subnet: SubNetSpec | None = None) -> list[ExitMetrics]:
    """Mean loss and error rate (class error or greedy token error) at each exit."""
    if eval_set.num_samples < 1:
        raise ConfigurationError("evaluation set is empty")
    outputs = forward(params, config, eval_set, subnet)
    return [ExitMetrics(m, exit_loss(lg, eval_set.targets, eval_set.task)[0], _error_rate(lg, eval_set))
            for m, lg in enumerate(outputs, 1)]
