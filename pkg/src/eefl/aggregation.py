"""Server-side aggregation of client pseudo-gradients and the server optimizers.

A pseudo-gradient is the parameter delta ``w_after - w_before`` produced by a
client's local epochs, so it already points downhill and the server *adds* it.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, DivergenceError, EEFLError, IntegrityError, ModelError
from .model import ParamSet, SubNetSpec

WEIGHTINGS = ("uniform", "by_samples")
SERVER_OPTIMIZERS = ("fedavg_sgd", "fedadam")


@dataclass
class ClientUpdate:
    client_id: int
    subnet: SubNetSpec
    pseudo_gradient: ParamSet
    num_samples: int
    local_epochs_run: int = 0
    local_losses: list = field(default_factory=list)

    def validate(self) -> None:
        if self.num_samples < 1:
            raise IntegrityError(f"client {self.client_id}: num_samples must be >= 1")
        self.subnet.check(self.pseudo_gradient.config)
        bad = [n for n in self.pseudo_gradient.outside_names(self.subnet.exits)
               if np.any(self.pseudo_gradient[n] != 0)]
        if bad:
            raise IntegrityError(
                f"client {self.client_id} with {self.subnet.exits} exits has nonzero segments outside its sub-net: {bad}"
            )

    def scaled(self, alpha: float) -> "ClientUpdate":
        return replace(self, pseudo_gradient=self.pseudo_gradient * alpha)


def _sorted_updates(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise EEFLError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate client_id in update list")
    first = ordered[0].pseudo_gradient.config.fingerprint()
    for u in ordered:
        if u.pseudo_gradient.config.fingerprint() != first:
            raise ModelError(f"client {u.client_id} sent parameters with a different layout")
    return ordered


def _weighted_sum(terms: Iterable[tuple[float, ParamSet]]) -> ParamSet:
    total = None
    for gamma, grad in terms:
        term = grad * gamma
        total = term if total is None else total + term
    return total


def fedavg(updates: Sequence[ClientUpdate], weighting: str = "uniform") -> ParamSet:
    """Weighted average of client pseudo-gradients with weights summing to one."""
    ordered = _sorted_updates(updates)
    if weighting == "uniform":
        gammas = [1.0 / len(ordered)] * len(ordered)
    elif weighting == "by_samples":
        total = float(sum(u.num_samples for u in ordered))
        gammas = [u.num_samples / total for u in ordered]
    else:
        raise ConfigurationError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    return _weighted_sum(zip(gammas, (u.pseudo_gradient for u in ordered)))


def group_by_exits(updates: Sequence[ClientUpdate]) -> dict[int, list[ClientUpdate]]:
    groups = defaultdict(list)
    for u in _sorted_updates(updates):
        groups[u.subnet.exits].append(u)
    return dict(sorted(groups.items()))


def aggregate_heterogeneous(updates: Sequence[ClientUpdate]) -> ParamSet:
    """Average within each sub-net size group, then sum the group averages.

    Lower layers thus collect one averaged contribution from every populated
    group that contains them; segments no client covers come out zero.
    """
    for u in updates:
        u.validate()
    total = None
    for _, members in group_by_exits(updates).items():
        gamma = 1.0 / len(members)
        group_avg = _weighted_sum((gamma, u.pseudo_gradient) for u in members)
        total = group_avg if total is None else total + group_avg
    return total


def coverage_counts(updates: Sequence[ClientUpdate]) -> dict[str, int]:
    """Number of clients whose sub-net contains each segment."""
    ordered = _sorted_updates(updates)
    params = ordered[0].pseudo_gradient
    counts = {name: 0 for name in params}
    for u in ordered:
        for name in params.subnet_names(u.subnet.exits):
            counts[name] += 1
    return counts


@dataclass
class EffectiveWeightReport:
    xi: list[float]
    client_counts: list[int]
    pi: list[float]
    effective_lr: list[float]
    base_lr: float

    @property
    def num_clients(self) -> int:
        return sum(self.client_counts)


def _exit_count(item) -> int:
    if isinstance(item, ClientUpdate):
        return item.subnet.exits
    if isinstance(item, SubNetSpec):
        return item.exits
    return int(item)


def compute_effective_weights(updates, num_exits: int, base_lr: float) -> EffectiveWeightReport:
    """Per-exit weights xi_m = (M - m) / pi(m), zero for exits with no clients.

    ``updates`` may hold ClientUpdates, SubNetSpecs or plain exit counts. This
    is a diagnostic of the implicit per-exit learning rate; aggregation never
    uses it.
    """
    if num_exits < 1:
        raise ConfigurationError("num_exits must be >= 1")
    counts = [0] * num_exits
    for item in updates:
        m = _exit_count(item)
        if not 1 <= m <= num_exits:
            raise ConfigurationError(f"exit count {m} outside [1, {num_exits}]")
        counts[m - 1] += 1
    total = sum(counts)
    pi = [c / total if total else 0.0 for c in counts]
    xi = [(num_exits - m) / pi[m - 1] if counts[m - 1] > 0 else 0.0 for m in range(1, num_exits + 1)]
    return EffectiveWeightReport(xi, counts, pi, [x * base_lr for x in xi], base_lr)


@dataclass(frozen=True)
class ServerOptimizerConfig:
    name: str = "fedadam"
    lr: float | None = None  # None: 1e-2 for fedadam, 1.0 (plain averaging) for fedavg_sgd
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-3

    def __post_init__(self):
        if self.name not in SERVER_OPTIMIZERS:
            raise ConfigurationError(f"server optimizer must be one of {SERVER_OPTIMIZERS}")
        if self.lr is None:
            object.__setattr__(self, "lr", 1e-2 if self.name == "fedadam" else 1.0)
        if self.lr < 0:
            raise ConfigurationError("server lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigurationError("invalid FedAdam hyperparameters")


@dataclass
class ServerState:
    round: int
    global_params: ParamSet
    adam_m: ParamSet
    adam_v: ParamSet
    optimizer: ServerOptimizerConfig = field(default_factory=ServerOptimizerConfig)

    @classmethod
    def initial(cls, params: ParamSet, optimizer: ServerOptimizerConfig | None = None) -> "ServerState":
        return cls(0, params.copy(), params.zeros_like(), params.zeros_like(),
                   optimizer or ServerOptimizerConfig())


def _check_grad(state: ServerState, grad: ParamSet) -> None:
    state.global_params._check_compatible(grad)
    if not grad.is_finite():
        raise DivergenceError(f"non-finite aggregated gradient at round {state.round}")


def server_step_sgd(state: ServerState, pseudo_grad: ParamSet, lr: float | None = None) -> ServerState:
    """w <- w + lr * pseudo_grad."""
    _check_grad(state, pseudo_grad)
    lr = state.optimizer.lr if lr is None else lr
    params = state.global_params + pseudo_grad * lr
    if not params.is_finite():
        raise DivergenceError(f"non-finite parameters after SGD step at round {state.round}")
    params.round_tag = state.round + 1
    return replace(state, round=state.round + 1, global_params=params)


def server_step_fedadam(state: ServerState, pseudo_grad: ParamSet) -> ServerState:
    """Adaptive server step with persistent first/second moments (no bias correction)."""
    _check_grad(state, pseudo_grad)
    opt = state.optimizer
    new_m, new_v, new_w = {}, {}, {}
    for name, delta in pseudo_grad.items():
        m = opt.beta1 * state.adam_m[name] + (1.0 - opt.beta1) * delta
        v = opt.beta2 * state.adam_v[name] + (1.0 - opt.beta2) * delta * delta
        new_m[name], new_v[name] = m, v
        new_w[name] = state.global_params[name] + opt.lr * m / (np.sqrt(v) + opt.eps)
    config = state.global_params.config
    params = ParamSet(config, new_w, round_tag=state.round + 1)
    if not params.is_finite():
        raise DivergenceError(f"non-finite parameters after FedAdam step at round {state.round}")
    return replace(state, round=state.round + 1, global_params=params,
                   adam_m=ParamSet(config, new_m), adam_v=ParamSet(config, new_v))


def server_step(state: ServerState, pseudo_grad: ParamSet) -> ServerState:
    if state.optimizer.name == "fedadam":
        return server_step_fedadam(state, pseudo_grad)
    return server_step_sgd(state, pseudo_grad)
