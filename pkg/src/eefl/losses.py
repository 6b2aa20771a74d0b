"""Task losses and the compound early-exit objective.

Every loss returns ``(value, gradient)`` with the gradient taken w.r.t. its
first argument. Batch losses are means over samples. The CTC blank is index 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax as _scipy_log_softmax
from scipy.special import logsumexp, softmax

from .exceptions import InfeasibleTargetError, ModelError

BLANK = 0


@dataclass
class ExitLossReport:
    per_exit: list[float]
    weights: list[float]
    compound: float

    @property
    def num_exits(self) -> int:
        return len(self.per_exit)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return _scipy_log_softmax(logits, axis=-1)


def log_softmax_backward(logits: np.ndarray, grad_log_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. log-softmax outputs back onto the logits."""
    p = softmax(logits, axis=-1)
    return grad_log_probs - p * grad_log_probs.sum(axis=-1, keepdims=True)


def cross_entropy(logits, target) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows; a 1-D ``logits`` is a single frame."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if z.ndim != 2 or z.shape[1] < 2:
        raise ModelError(f"logits must be (N, V) with V >= 2, got {logits.shape}")
    if target.shape != (z.shape[0],):
        raise ModelError(f"expected {z.shape[0]} targets, got {target.shape}")
    if np.any(target < 0) or np.any(target >= z.shape[1]):
        raise ModelError("target class out of range")
    n = z.shape[0]
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -float(logp[rows, target].mean())
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    grad /= n
    return loss, grad[0] if single else grad


def ctc_feasible(num_frames: int, target) -> bool:
    target = np.asarray(target)
    repeats = int(np.sum(target[1:] == target[:-1])) if len(target) > 1 else 0
    return num_frames >= len(target) + repeats


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """x shifted right by k along the last axis, padded with -inf."""
    out = np.full_like(x, -np.inf)
    out[..., k:] = x[..., :-k]
    return out


def ctc_loss(log_probs, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` under CTC, and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is (T, V) with the blank at column 0. The entries are treated
    as free inputs, so the gradient is minus the per-frame label posteriors.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if lp.ndim != 2:
        raise ModelError(f"log_probs must be (T, V), got {lp.shape}")
    T, V = lp.shape
    if np.any(target == BLANK) or np.any(target < 0) or np.any(target >= V):
        raise ModelError("CTC targets must lie in [1, V)")
    if not ctc_feasible(T, target):
        raise InfeasibleTargetError(
            f"target of length {len(target)} cannot be aligned to {T} frames"
        )

    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    S = len(ext)
    # a label may be reached from two states back unless it repeats the previous label
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = np.logaddexp(nxt, _shift(nxt[::-1], 1)[::-1])
        acc = np.where(skip_next, np.logaddexp(acc, _shift(nxt[::-1], 2)[::-1]), acc)
        beta[t] = acc + emit[t]

    log_like = logsumexp(alpha[T - 1, -2:]) if S > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_like):
        raise InfeasibleTargetError("no alignment has nonzero probability")

    occupancy = np.exp(alpha + beta - emit - log_like)  # P(state s at frame t | target)
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= occupancy[:, s]
    return -float(log_like), grad


def exit_loss(logits: np.ndarray, targets, task: str) -> tuple[float, np.ndarray]:
    N, T, _ = logits.shape
    if task == "classification":
        pooled = logits.mean(axis=1)
        loss, g = cross_entropy(pooled, targets)
        return loss, np.repeat(g[:, None, :] / T, T, axis=1)
    if task == "ctc":
        total = 0.0
        grad = np.empty_like(logits)
        for i in range(N):
            lp = log_softmax(logits[i])
            loss_i, g_lp = ctc_loss(lp, targets[i])
            total += loss_i
            grad[i] = log_softmax_backward(logits[i], g_lp) / N
        return total / N, grad
    raise ModelError(f"unknown task {task!r}")


def exit_losses(per_exit_logits: Sequence[np.ndarray], targets, task: str = "classification") -> list[float]:
    return [exit_loss(np.asarray(lg, dtype=np.float64), targets, task)[0] for lg in per_exit_logits]


def compound_ee_loss(per_exit_logits: Sequence[np.ndarray], targets, task: str = "classification",
                     weights: Sequence[float] | None = None) -> tuple[ExitLossReport, list[np.ndarray]]:
    """Weighted sum of per-exit losses, plus each exit's weighted logit gradient.

    Exits with weight 0 contribute an all-zero gradient.
    """
    n = len(per_exit_logits)
    weights = [1.0] * n if weights is None else [float(w) for w in weights]
    if len(weights) != n:
        raise ModelError(f"{len(weights)} exit weights given for {n} exits")
    per_exit, grads = [], []
    for logits, w in zip(per_exit_logits, weights):
        logits = np.asarray(logits, dtype=np.float64)
        loss, g = exit_loss(logits, targets, task)
        per_exit.append(loss)
        grads.append(g * w if w != 0.0 else np.zeros_like(g))
    compound = float(sum(w * l for w, l in zip(weights, per_exit)))
    return ExitLossReport(per_exit, weights, compound), grads
