"""Tempered distributions, the KL label regularizer and the combined objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, log_softmax_array, softmax_array

DEFAULT_TEMPERATURE = 4.0


@dataclass(frozen=True)
class Distribution:
    p: np.ndarray
    temperature: float


def default_gamma(temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Balance weight that offsets the 1/T^2 shrinkage of soft-target gradients."""
    return float(temperature) ** 2


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature


def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 1:
        return T.reshape(t, (1, t.shape[0])), True
    if t.ndim != 2:
        raise ValueError(f"expected a score vector or [N, n] batch, got shape {t.shape}")
    return t, False


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return T.mean(per_sample)
    if reduction == "sum":
        return T.sum(per_sample)
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def tempered_softmax(scores, temperature: float = 1.0) -> Distribution:
    temperature = _check_temperature(temperature)
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    return Distribution(softmax_array(s / temperature, axis=-1), temperature)


def kl_regularizer(s_prev_extended, scores, temperature: float = DEFAULT_TEMPERATURE,
                   reduction: str = "mean", detach_target: bool = True) -> Tensor:
    """KL(p' || p) between tempered softmaxes of the extended parent scores and ``scores``.

    The parent-side distribution is a constant unless ``detach_target`` is False.
    Accepts single vectors or [N, n] batches; per-sample values are reduced by
    ``reduction`` ("mean", "sum" or "none").
    """
    temperature = _check_temperature(temperature)
    target, _ = _as_batch(s_prev_extended)
    s, single = _as_batch(scores)
    if target.shape != s.shape:
        raise ValueError(f"length mismatch: extended parent scores {target.shape} vs scores {s.shape}")
    log_p = T.log_softmax(T.mul(s, 1.0 / temperature), axis=-1)
    if detach_target or not target.requires_grad:
        log_q_arr = log_softmax_array(target.data / temperature, axis=-1)
        q = Tensor(np.exp(log_q_arr))
        per = T.sum(T.mul(q, T.sub(Tensor(log_q_arr), log_p)), axis=-1)
    else:
        log_q = T.log_softmax(T.mul(target, 1.0 / temperature), axis=-1)
        per = T.sum(T.mul(T.exp(log_q), T.sub(log_q, log_p)), axis=-1)
    if single and reduction == "none":
        return T.reshape(per, ())
    return _reduce(per, reduction)


def cross_entropy(scores, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(``scores``) at temperature 1."""
    s, single = _as_batch(scores)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if target.shape != (s.shape[0],):
        raise ValueError(f"{target.shape[0]} targets for {s.shape[0]} score rows")
    if np.any(target < 0) or np.any(target >= s.shape[1]):
        raise IndexError(f"target index out of range [0, {s.shape[1]})")
    per = T.neg(T.take(T.log_softmax(s, axis=-1), target))
    if single and reduction == "none":
        return T.reshape(per, ())
    return _reduce(per, reduction)


def level_loss(ce_terms: Sequence, reg=None, gamma: float = default_gamma()):
    """Sum of a level's classification terms plus ``gamma`` times its regularizer."""
    total = ce_terms[0]
    for term in ce_terms[1:]:
        total = total + term
    if reg is not None and gamma != 0:
        total = total + gamma * reg
    return total


def total_loss(level_losses: Sequence):
    """Sum of the level-1 classification loss and every finer level's combined loss."""
    total = level_losses[0]
    for term in level_losses[1:]:
        total = total + term
    return total


@dataclass
class LossBundle:
    """Per-level loss components of one batch (python floats) plus the graph-carrying total."""

    classification: list[float]
    regularization: list[float | None]
    combined: list[float]
    gamma: float
    total: Tensor | None = field(default=None, repr=False)

    @property
    def total_value(self) -> float:
        return float(sum(self.combined))
