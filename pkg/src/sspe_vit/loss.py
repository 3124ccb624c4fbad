"""Cross-entropy, label-smoothing cross-entropy and the hybrid objective.

Two-class only: the smoothing mass is split as eps/2 per class.  The
probability-space functions are the reference forms; ``hybrid_loss_from_logits``
is the differentiable training path and computes the same quantity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .augment import FULL_KL, GRADES, MIXED_KL, grade_index
from .numerics import Tensor

LOG_FLOOR = 1e-12
REDUCTIONS = ("mean", "sum")

_floor_hits = 0


def log_floor_hits() -> int:
    """How many times a log argument was clamped to LOG_FLOOR."""
    return _floor_hits


def reset_log_floor_hits() -> None:
    global _floor_hits
    _floor_hits = 0


@dataclass(frozen=True)
class SmoothedTarget:
    weights: np.ndarray
    epsilon: float


@dataclass(frozen=True)
class HybridLossConfig:
    epsilon: float = 0.2
    alpha: float = 0.3
    beta: float = 0.7
    reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


def _check_one_hot(one_hot) -> np.ndarray:
    y = np.asarray(one_hot, dtype=np.float64)
    if y.shape != (2,) or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError(f"expected a 2-class one-hot vector, got {one_hot}")
    return y


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be non-negative and sum to 1")
    return p


def _safe_log(p: np.ndarray) -> np.ndarray:
    global _floor_hits
    low = p < LOG_FLOOR
    _floor_hits += int(np.count_nonzero(low))
    return np.log(np.where(low, LOG_FLOOR, p))


def smooth_labels(one_hot, epsilon: float) -> SmoothedTarget:
    """Soften a one-hot target: y * (1 - eps) + eps / 2."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    y = _check_one_hot(one_hot)
    return SmoothedTarget(y * (1.0 - epsilon) + epsilon / 2.0, epsilon)


def ce_loss(probs, one_hot) -> float:
    p = _check_probs(probs)
    y = _check_one_hot(one_hot)
    true = int(np.argmax(y))
    return float(-_safe_log(p[true : true + 1])[0])


def lsce_loss(probs, smoothed: SmoothedTarget | Sequence[float]) -> float:
    p = _check_probs(probs)
    w = np.asarray(getattr(smoothed, "weights", smoothed), dtype=np.float64)
    # entries with zero weight never touch the log
    nz = w != 0
    return float(-(w[nz] * _safe_log(p[nz])).sum())


def one_hot(grade: str) -> np.ndarray:
    y = np.zeros(len(GRADES))
    y[grade_index(grade)] = 1.0
    return y


def hybrid_loss(batch: Iterable[tuple[Sequence[float], str, str]], config: HybridLossConfig) -> float:
    """alpha * LSCE over mixed-KL members + beta * CE over full-KL members.

    Each subset is averaged over its own size under ``reduction="mean"``;
    an empty subset contributes 0.
    """
    lsce_terms, ce_terms = [], []
    for probs, label, tag in batch:
        y = one_hot(label)
        if tag == MIXED_KL:
            lsce_terms.append(lsce_loss(probs, smooth_labels(y, config.epsilon)))
        elif tag == FULL_KL:
            ce_terms.append(ce_loss(probs, y))
        else:
            raise ValueError(f"unknown set tag {tag!r}")
    reduce = np.mean if config.reduction == "mean" else np.sum
    j_lsce = float(reduce(lsce_terms)) if lsce_terms else 0.0
    j_ce = float(reduce(ce_terms)) if ce_terms else 0.0
    return config.alpha * j_lsce + config.beta * j_ce


def hybrid_target_weights(labels: Sequence[str], tags: Sequence[str], config: HybridLossConfig) -> np.ndarray:
    """Per-row class weights W such that the hybrid loss is -sum(W * log p)."""
    n = len(labels)
    w = np.zeros((n, len(GRADES)))
    mixed = np.array([t == MIXED_KL for t in tags], dtype=bool)
    for i, (label, tag) in enumerate(zip(labels, tags)):
        if tag not in (FULL_KL, MIXED_KL):
            raise ValueError(f"unknown set tag {tag!r}")
        y = one_hot(label)
        w[i] = smooth_labels(y, config.epsilon).weights if mixed[i] else y
    n_m, n_f = int(mixed.sum()), int((~mixed).sum())
    if config.reduction == "mean":
        scale_m = config.alpha / n_m if n_m else 0.0
        scale_f = config.beta / n_f if n_f else 0.0
    else:
        scale_m, scale_f = config.alpha, config.beta
    w[mixed] *= scale_m
    w[~mixed] *= scale_f
    return w


def hybrid_loss_from_logits(
    logits: Tensor, labels: Sequence[str], tags: Sequence[str], config: HybridLossConfig
) -> Tensor:
    w = hybrid_target_weights(labels, tags, config)
    return -(nx.log_softmax(logits) * w).sum()


def ce_from_logits(logits: Tensor, labels: Sequence[str]) -> Tensor:
    """Mean cross-entropy of a batch of logits."""
    y = np.stack([one_hot(g) for g in labels]) / len(labels)
    return -(nx.log_softmax(logits) * y).sum()


def lsce_from_logits(logits: Tensor, labels: Sequence[str], epsilon: float) -> Tensor:
    y = np.stack([smooth_labels(one_hot(g), epsilon).weights for g in labels]) / len(labels)
    return -(nx.log_softmax(logits) * y).sum()
