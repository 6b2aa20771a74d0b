"""Client populations, sub-net size profiles and per-round sampling.

All randomness comes from Philox (counter-based) generators keyed by
``(seed, stream, *ids)`` so any round can be reproduced in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError
from .model import SubNetSpec

# stream tags for independent random streams
STREAM_SAMPLING = 0
STREAM_SHUFFLE = 1
STREAM_FIXED_ASSIGNMENT = 2
STREAM_DATA = 3
STREAM_PRETRAIN = 4

SIX_EXIT_PROFILES = {
    "regular": (0.4, 0.2, 0.2, 0.1, 0.05, 0.05),
    "extreme": (0.8, 0.1, 0.025, 0.025, 0.025, 0.025),
}


def make_rng(seed: int, stream: int, *ids: int) -> np.random.Generator:
    entropy = [int(seed), int(stream), *(int(i) for i in ids)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class HeterogeneityProfile:
    name: str
    probs: tuple

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise ConfigurationError("profile needs at least one probability")
        if any(p < 0 or not math.isfinite(p) for p in probs):
            raise ConfigurationError(f"profile {self.name!r} has invalid probabilities {probs}")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ConfigurationError(f"profile {self.name!r} sums to {sum(probs)!r}, not 1")

    @property
    def num_exits(self) -> int:
        return len(self.probs)

    @property
    def is_homogeneous(self) -> bool:
        return self.probs[-1] == 1.0


def builtin_profile(name: str, num_exits: int) -> HeterogeneityProfile:
    """Named sub-net distributions.

    ``uniform`` works for any exit count. ``full`` puts every client on the
    whole model (homogeneous training). ``regular`` and ``extreme`` are only
    defined for six exits.
    """
    if num_exits < 1:
        raise ConfigurationError("num_exits must be >= 1")
    if name == "uniform":
        return HeterogeneityProfile(name, (1.0 / num_exits,) * num_exits)
    if name == "full":
        return HeterogeneityProfile(name, (0.0,) * (num_exits - 1) + (1.0,))
    if name in SIX_EXIT_PROFILES:
        probs = SIX_EXIT_PROFILES[name]
        if num_exits != len(probs):
            raise ConfigurationError(f"profile {name!r} is defined for {len(probs)} exits, not {num_exits}")
        return HeterogeneityProfile(name, probs)
    raise ConfigurationError(f"unknown profile {name!r}")


def resolve_profile(value, num_exits: int) -> HeterogeneityProfile:
    """Accept a builtin name or an explicit probability vector."""
    if isinstance(value, HeterogeneityProfile):
        profile = value
    elif isinstance(value, str):
        return builtin_profile(value, num_exits)
    else:
        profile = HeterogeneityProfile("custom", tuple(value))
    if profile.num_exits != num_exits:
        raise ConfigurationError(f"profile has {profile.num_exits} entries for a {num_exits}-exit model")
    return profile


@dataclass(frozen=True)
class ClientPopulation:
    num_clients: int
    fraction: float = 0.1
    seed: int = 0
    fixed_assignment: bool = False

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"fraction must lie in (0, 1], got {self.fraction}")

    @property
    def clients_per_round(self) -> int:
        # guard against 0.1 * 580 == 58.00000000000001
        return max(1, math.ceil(round(self.fraction * self.num_clients, 9)))


def _draw_exits(rng: np.random.Generator, probs: Sequence[float], size: int) -> np.ndarray:
    return rng.choice(len(probs), size=size, p=np.asarray(probs)) + 1


def sample_round(population: ClientPopulation, profile: HeterogeneityProfile,
                 round_index: int) -> list[tuple[int, SubNetSpec]]:
    """Pick this round's clients (without replacement) and their sub-net sizes.

    Returned pairs are sorted by client id.
    """
    rng = make_rng(population.seed, STREAM_SAMPLING, round_index)
    k = population.clients_per_round
    chosen = np.sort(rng.choice(population.num_clients, size=k, replace=False))
    if population.fixed_assignment:
        exits = [int(_draw_exits(make_rng(population.seed, STREAM_FIXED_ASSIGNMENT, c), profile.probs, 1)[0])
                 for c in chosen]
    else:
        exits = [int(e) for e in _draw_exits(rng, profile.probs, k)]
    return [(int(c), SubNetSpec(e)) for c, e in zip(chosen, exits)]


def round_schedule(population: ClientPopulation, profile: HeterogeneityProfile,
                   rounds: int) -> list[list[tuple[int, SubNetSpec]]]:
    return [sample_round(population, profile, t) for t in range(rounds)]
