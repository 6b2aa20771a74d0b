"""Synthetic stand-in corpora with one shard per client.

Classification samples come from per-class Gaussian mixtures (several
clusters per class so the boundary is nonlinear). CTC samples render a token
sequence as noisy embedding frames separated by silence frames. The class
geometry depends only on ``seed``, so a ``domain_shift`` corpus shares labels
with its source corpus and differs by a fixed affine distortion of the features.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, InfeasibleTargetError
from .heterogeneity import STREAM_DATA, make_rng
from .losses import ctc_feasible
from .model import Batch

# sub-streams under STREAM_DATA
_GEOMETRY, _SHIFT, _SAMPLES_SOURCE, _SAMPLES_TARGET = 0, 1, 2, 3


@dataclass
class Corpus:
    shards: list[Batch]
    eval_set: Batch
    task: str
    num_classes: int
    domain_shift: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def pooled(self) -> Batch:
        return Batch.concat(self.shards)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for batch in [*self.shards, self.eval_set]:
            h.update(np.ascontiguousarray(batch.features).tobytes())
            if batch.task == "classification":
                h.update(batch.targets.tobytes())
            else:
                for t in batch.targets:
                    h.update(t.tobytes() + b"|")
        return h.hexdigest()


def _preferred_classes(client: int, choices: np.ndarray, per_client: int) -> np.ndarray:
    k = len(choices)
    return choices[(client * per_client + np.arange(per_client)) % k]


def _labels(rng, client: int, n: int, choices: np.ndarray, skew: float) -> np.ndarray:
    """Round-robin labels (balanced within one count) with a fraction ``skew`` redrawn from preferred classes."""
    labels = choices[(np.arange(n) + client) % len(choices)]
    if skew > 0:
        preferred = _preferred_classes(client, choices, max(1, len(choices) // 4))
        flip = rng.random(n) < skew
        labels = np.where(flip, rng.choice(preferred, size=n), labels)
    return labels


def _affine_shift(seed: int, dim: int, strength: float):
    rng = make_rng(seed, STREAM_DATA, _SHIFT)
    A = np.eye(dim) + strength * rng.normal(size=(dim, dim)) / np.sqrt(dim)
    b = strength * rng.normal(size=dim)
    return A, b


def generate_synthetic_corpus(seed: int = 0, task: str = "classification", num_clients: int = 60,
                              samples_per_client: int = 40, skew: float = 0.0, *,
                              input_dim: int = 8, num_classes: int = 8, eval_samples: int = 400,
                              clusters_per_class: int = 2, cluster_spread: float = 1.5,
                              noise: float = 0.5, domain_shift: bool = False, shift_strength: float = 0.6,
                              num_frames: int = 12, max_tokens: int = 4) -> Corpus:
    """Build ``num_clients`` shards plus a held-out evaluation set from one seed.

    For CTC, ``num_classes`` counts the blank, so tokens are ``1 .. num_classes-1``.
    """
    if num_clients < 1 or samples_per_client < 1 or eval_samples < 1:
        raise ConfigurationError("client, sample and eval counts must be positive")
    if not 0.0 <= skew <= 1.0:
        raise ConfigurationError("skew must lie in [0, 1]")
    geom = make_rng(seed, STREAM_DATA, _GEOMETRY)
    samples = make_rng(seed, STREAM_DATA, _SAMPLES_TARGET if domain_shift else _SAMPLES_SOURCE)
    shift = _affine_shift(seed, input_dim, shift_strength) if domain_shift else None

    def distort(x):
        if shift is None:
            return x
        A, b = shift
        return x @ A.T + b

    if task == "classification":
        centers = geom.normal(scale=cluster_spread, size=(num_classes, clusters_per_class, input_dim))
        classes = np.arange(num_classes)

        def draw(client, n, skew_):
            y = _labels(samples, client, n, classes, skew_)
            sub = samples.integers(clusters_per_class, size=n)
            x = centers[y, sub] + noise * samples.normal(size=(n, input_dim))
            return Batch(distort(x)[:, None, :], y, task)

    elif task == "ctc":
        if num_classes < 2:
            raise ConfigurationError("CTC needs at least one non-blank token")
        if num_frames < 2 * max_tokens:
            raise InfeasibleTargetError(f"num_frames={num_frames} < 2 * max_tokens={max_tokens}")
        embeddings = geom.normal(scale=cluster_spread, size=(num_classes, input_dim))
        embeddings[0] = 0.0  # silence renders as the blank embedding
        tokens = np.arange(1, num_classes)

        def draw(client, n, skew_):
            feats = np.empty((n, num_frames, input_dim))
            targets = []
            pool = _labels(samples, client, n * max_tokens, tokens, skew_)
            for i in range(n):
                u = int(samples.integers(1, max_tokens + 1))
                seq = pool[i * max_tokens:i * max_tokens + u]
                seg = num_frames // u
                frame_ids = np.zeros(num_frames, dtype=np.int64)
                for j, tok in enumerate(seq):
                    frame_ids[j * seg:(j + 1) * seg - 1] = tok
                if not ctc_feasible(num_frames, seq):
                    raise InfeasibleTargetError("generated an unalignable CTC sample")
                feats[i] = embeddings[frame_ids] + noise * samples.normal(size=(num_frames, input_dim))
                targets.append(seq)
            return Batch(distort(feats.reshape(-1, input_dim)).reshape(feats.shape), targets, task)

    else:
        raise ConfigurationError(f"unknown task {task!r}")

    shards = [draw(c, samples_per_client, skew) for c in range(num_clients)]
    eval_set = draw(0, eval_samples, 0.0)
    meta = dict(seed=seed, skew=skew, input_dim=input_dim, noise=noise,
                clusters_per_class=clusters_per_class, samples_per_client=samples_per_client)
    return Corpus(shards, eval_set, task, num_classes, domain_shift, meta)
