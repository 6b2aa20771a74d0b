"""Early-exit model: a stack of dense blocks with a linear exit head every few blocks.

Exit ``m`` (1-based) reads the output of block ``m * exit_every``. A sub-net with
``l`` exits therefore owns blocks ``1 .. l * exit_every`` and heads ``1 .. l``.
All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigurationError, ModelError

ACTIVATIONS = ("tanh", "relu")
TASKS = ("classification", "ctc")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 8
    hidden_dim: int = 16
    num_blocks: int = 6
    exit_every: int = 2
    output_dim: int = 8
    frontend_blocks: int = 1
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "num_blocks", "exit_every", "output_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.num_blocks % self.exit_every != 0:
            raise ConfigurationError(
                f"num_blocks={self.num_blocks} is not a multiple of exit_every={self.exit_every}"
            )
        if not 0 <= self.frontend_blocks < self.exit_every:
            raise ConfigurationError(
                f"frontend_blocks={self.frontend_blocks} must lie in [0, exit_every={self.exit_every})"
            )
        if self.output_dim < 2:
            raise ConfigurationError("output_dim must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @property
    def num_exits(self) -> int:
        return self.num_blocks // self.exit_every

    @classmethod
    def full_scale_preset(cls, **overrides) -> "ModelConfig":
        """Full-size layout: 12 blocks, an exit every 2 blocks, 6 exits."""
        kwargs = dict(input_dim=80, hidden_dim=256, num_blocks=12, exit_every=2,
                      output_dim=257, frontend_blocks=1)
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        """Hash of the layout-determining fields (the seed is excluded)."""
        layout = {k: v for k, v in self.to_dict().items() if k != "seed"}
        blob = json.dumps(layout, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def block_dims(self, block: int) -> tuple[int, int]:
        fan_in = self.input_dim if block == 1 else self.hidden_dim
        return fan_in, self.hidden_dim

    def segment_specs(self) -> list["SegmentSpec"]:
        specs = []
        for block in range(1, self.num_blocks + 1):
            fan_in, fan_out = self.block_dims(block)
            specs.append(SegmentSpec(f"block{block}.weight", (fan_in, fan_out), "block", block, "weight"))
            specs.append(SegmentSpec(f"block{block}.bias", (fan_out,), "block", block, "bias"))
            if block % self.exit_every == 0:
                m = block // self.exit_every
                specs.append(SegmentSpec(f"exit{m}.weight", (self.hidden_dim, self.output_dim), "head", m, "weight"))
                specs.append(SegmentSpec(f"exit{m}.bias", (self.output_dim,), "head", m, "bias"))
        return specs


@dataclass(frozen=True)
class SegmentSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # "block" or "head"
    index: int
    role: str  # "weight" or "bias"

    @property
    def fan_in(self) -> int:
        return self.shape[0]

    def in_subnet(self, exits: int, exit_every: int) -> bool:
        if self.kind == "head":
            return self.index <= exits
        return self.index <= exits * exit_every

    def is_frontend(self, frontend_blocks: int) -> bool:
        return self.kind == "block" and self.index <= frontend_blocks


@dataclass(frozen=True)
class SubNetSpec:
    exits: int

    def __post_init__(self):
        if self.exits < 1:
            raise ConfigurationError(f"a sub-net needs at least one exit, got {self.exits}")

    def check(self, config: ModelConfig) -> None:
        if self.exits > config.num_exits:
            raise ModelError(f"sub-net with {self.exits} exits exceeds the model's {config.num_exits}")

    def num_blocks(self, config: ModelConfig) -> int:
        return self.exits * config.exit_every


@dataclass
class Batch:
    """A group of samples sharing the frame count T.

    ``features`` has shape (N, T, input_dim). ``targets`` is an int array of
    shape (N,) for classification, or a list of N int token arrays for CTC.
    """

    features: np.ndarray
    targets: object
    task: str = "classification"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.features = self.features[:, None, :]
        if self.features.ndim != 3 or self.features.shape[1] < 1:
            raise ModelError(f"features must have shape (N, T, D), got {self.features.shape}")
        if self.task not in TASKS:
            raise ModelError(f"unknown task {self.task!r}")
        if self.task == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        else:
            self.targets = [np.asarray(t, dtype=np.int64).reshape(-1) for t in self.targets]
            T = self.features.shape[1]
            for tokens in self.targets:
                if len(tokens) > T:
                    raise ModelError(f"CTC target of length {len(tokens)} exceeds T={T}")
        if len(self.targets) != self.features.shape[0]:
            raise ModelError("features and targets disagree on the sample count")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.num_samples

    def take(self, indices) -> "Batch":
        indices = np.asarray(indices, dtype=np.int64)
        if self.task == "classification":
            targets = self.targets[indices]
        else:
            targets = [self.targets[i] for i in indices]
        return Batch(self.features[indices], targets, self.task)

    def minibatches(self, batch_size: int, order=None) -> Iterator["Batch"]:
        order = np.arange(self.num_samples) if order is None else np.asarray(order)
        for start in range(0, self.num_samples, batch_size):
            yield self.take(order[start:start + batch_size])

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        if not batches:
            raise ModelError("cannot concatenate zero batches")
        task = batches[0].task
        features = np.concatenate([b.features for b in batches], axis=0)
        if task == "classification":
            targets = np.concatenate([b.targets for b in batches])
        else:
            targets = [t for b in batches for t in b.targets]
        return Batch(features, targets, task)


class ParamSet:
    """Named, block-segmented float64 parameters laid out by a ModelConfig.

    Segment order is fixed: each block's weight and bias, with exit head ``m``
    placed right after block ``m * exit_every``. Arithmetic operators work
    segment-wise and return new ParamSets.
    """

    def __init__(self, config: ModelConfig, arrays: dict | None = None, round_tag: int = 0):
        self.config = config
        self.specs = config.segment_specs()
        self.round_tag = int(round_tag)
        if arrays is None:
            self.arrays = {s.name: np.zeros(s.shape) for s in self.specs}
        else:
            self.arrays = {}
            for spec in self.specs:
                if spec.name not in arrays:
                    raise ModelError(f"missing segment {spec.name}")
                arr = np.asarray(arrays[spec.name], dtype=np.float64)
                if arr.shape != spec.shape:
                    raise ModelError(f"segment {spec.name} has shape {arr.shape}, expected {spec.shape}")
                self.arrays[spec.name] = arr
            extra = set(arrays) - set(self.arrays)
            if extra:
                raise ModelError(f"unexpected segments: {sorted(extra)}")

    # container protocol
    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.arrays[name].shape:
            raise ModelError(f"segment {name} has shape {self.arrays[name].shape}, got {value.shape}")
        self.arrays[name] = value

    def __iter__(self):
        return iter(s.name for s in self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def items(self):
        return ((s.name, self.arrays[s.name]) for s in self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def spec(self, name: str) -> SegmentSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    # construction helpers
    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.config, round_tag=self.round_tag)

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.round_tag)

    def map(self, fn) -> "ParamSet":
        return ParamSet(self.config, {s.name: fn(self.arrays[s.name]) for s in self.specs}, self.round_tag)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[s.name].ravel() for s in self.specs])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray, round_tag: int = 0) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        arrays, offset = {}, 0
        for spec in config.segment_specs():
            n = int(np.prod(spec.shape))
            arrays[spec.name] = flat[offset:offset + n].reshape(spec.shape).copy()
            offset += n
        if offset != flat.size:
            raise ModelError(f"flat vector has {flat.size} entries, layout needs {offset}")
        return cls(config, arrays, round_tag)

    # arithmetic
    def _check_compatible(self, other: "ParamSet") -> None:
        if not isinstance(other, ParamSet):
            raise TypeError(f"expected ParamSet, got {type(other).__name__}")
        if other.config.fingerprint() != self.config.fingerprint():
            raise ModelError("ParamSets come from different model layouts")

    def _binary(self, other, op) -> "ParamSet":
        self._check_compatible(other)
        return ParamSet(self.config, {s.name: op(self.arrays[s.name], other.arrays[s.name])
                                      for s in self.specs}, self.round_tag)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        scalar = float(scalar)
        return self.map(lambda a: a * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        scalar = float(scalar)
        return self.map(lambda a: a / scalar)

    def __neg__(self):
        return self.map(np.negative)

    def array_equal(self, other: "ParamSet") -> bool:
        self._check_compatible(other)
        return all(np.array_equal(self.arrays[n], other.arrays[n]) for n in self)

    def allclose(self, other: "ParamSet", rtol=1e-12, atol=1e-12) -> bool:
        self._check_compatible(other)
        return all(np.allclose(self.arrays[n], other.arrays[n], rtol=rtol, atol=atol) for n in self)

    def max_abs_diff(self, other: "ParamSet") -> float:
        self._check_compatible(other)
        return max(float(np.max(np.abs(self.arrays[n] - other.arrays[n]), initial=0.0)) for n in self)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    # layout queries
    def subnet_names(self, exits: int) -> list[str]:
        return [s.name for s in self.specs if s.in_subnet(exits, self.config.exit_every)]

    def outside_names(self, exits: int) -> list[str]:
        return [s.name for s in self.specs if not s.in_subnet(exits, self.config.exit_every)]

    def frontend_names(self) -> list[str]:
        return [s.name for s in self.specs if s.is_frontend(self.config.frontend_blocks)]

    def nonzero_names(self) -> list[str]:
        return [n for n, a in self.items() if np.any(a != 0)]

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} segments, {self.size} values, round={self.round_tag})"


def init_model(config: ModelConfig) -> ParamSet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a seeded Philox stream; biases zero."""
    config.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(config.seed))))
    arrays = {}
    for spec in config.segment_specs():
        if spec.role == "weight":
            bound = 1.0 / np.sqrt(spec.fan_in)
            arrays[spec.name] = rng.uniform(-bound, bound, size=spec.shape)
        else:
            arrays[spec.name] = np.zeros(spec.shape)
    return ParamSet(config, arrays, round_tag=0)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


@dataclass
class ForwardCache:
    """Intermediates kept by :func:`forward_with_cache` for :func:`backward`."""

    exits: int
    input_shape: tuple
    fingerprint: str
    inputs: list = field(default_factory=list)       # block inputs, (N*T, fan_in)
    preacts: list = field(default_factory=list)      # z = h W + b
    acts: list = field(default_factory=list)         # act(z)
    exit_inputs: list = field(default_factory=list)  # hidden state feeding each head


def _check_params(params: ParamSet, config: ModelConfig) -> None:
    if params.config.fingerprint() != config.fingerprint():
        raise ModelError("parameters do not match the model configuration")


def forward_with_cache(params: ParamSet, config: ModelConfig, batch: Batch,
                       subnet: SubNetSpec) -> tuple[list[np.ndarray], ForwardCache]:
    _check_params(params, config)
    subnet.check(config)
    x = batch.features
    N, T, D = x.shape
    if D != config.input_dim:
        raise ModelError(f"features have dim {D}, model expects {config.input_dim}")
    h = x.reshape(N * T, D)
    cache = ForwardCache(subnet.exits, x.shape, config.fingerprint())
    outputs = []
    for block in range(1, subnet.num_blocks(config) + 1):
        W, b = params[f"block{block}.weight"], params[f"block{block}.bias"]
        z = h @ W + b
        a = _activate(z, config.activation)
        cache.inputs.append(h)
        cache.preacts.append(z)
        cache.acts.append(a)
        h = a + h if W.shape[0] == W.shape[1] else a
        if block % config.exit_every == 0:
            m = block // config.exit_every
            cache.exit_inputs.append(h)
            logits = h @ params[f"exit{m}.weight"] + params[f"exit{m}.bias"]
            outputs.append(logits.reshape(N, T, config.output_dim))
    return outputs, cache


def forward(params: ParamSet, config: ModelConfig, batch: Batch, subnet: SubNetSpec | None = None) -> list[np.ndarray]:
    """Return one (N, T, output_dim) logit array per active exit."""
    subnet = SubNetSpec(config.num_exits) if subnet is None else subnet
    outputs, _ = forward_with_cache(params, config, batch, subnet)
    return outputs


def backward(params: ParamSet, config: ModelConfig, batch: Batch, subnet: SubNetSpec,
             per_exit_loss_grads: Sequence[np.ndarray], cache: ForwardCache | None = None,
             freeze_frontend: bool = False) -> ParamSet:
    """Backpropagate per-exit logit gradients into a gradient ParamSet.

    Segments outside the sub-net stay exactly zero, as do front-end blocks
    when ``freeze_frontend`` is set.
    """
    _check_params(params, config)
    subnet.check(config)
    if cache is None:
        _, cache = forward_with_cache(params, config, batch, subnet)
    if (cache.exits != subnet.exits or cache.input_shape != batch.features.shape
            or cache.fingerprint != config.fingerprint()):
        raise ModelError("forward intermediates do not match this backward call")
    if len(per_exit_loss_grads) != subnet.exits:
        raise ModelError(f"expected {subnet.exits} logit gradients, got {len(per_exit_loss_grads)}")

    N, T, _ = batch.features.shape
    grad = params.zeros_like()
    lowest = config.frontend_blocks + 1 if freeze_frontend else 1
    dh = np.zeros((N * T, config.hidden_dim))
    for block in range(subnet.num_blocks(config), lowest - 1, -1):
        if block % config.exit_every == 0:
            m = block // config.exit_every
            g = np.asarray(per_exit_loss_grads[m - 1], dtype=np.float64)
            if g.shape != (N, T, config.output_dim):
                raise ModelError(f"exit {m} gradient has shape {g.shape}")
            g = g.reshape(N * T, config.output_dim)
            h_exit = cache.exit_inputs[m - 1]
            grad[f"exit{m}.weight"] = h_exit.T @ g
            grad[f"exit{m}.bias"] = g.sum(axis=0)
            dh = dh + g @ params[f"exit{m}.weight"].T
        W = params[f"block{block}.weight"]
        z, a, h_in = cache.preacts[block - 1], cache.acts[block - 1], cache.inputs[block - 1]
        dz = dh * _activation_grad(z, a, config.activation)
        grad[f"block{block}.weight"] = h_in.T @ dz
        grad[f"block{block}.bias"] = dz.sum(axis=0)
        if block > lowest:
            dh_in = dz @ W.T
            if W.shape[0] == W.shape[1]:
                dh_in = dh_in + dh
            dh = dh_in
    return grad
