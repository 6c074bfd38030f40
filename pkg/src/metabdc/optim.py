"""Optimizers, learning-rate schedules, and the AUC-margin loss.

The AUC-margin surrogate is a min-max objective: squared deviations of
positive scores from a center a and negative scores from b, plus a dual
variable alpha enforcing the margin between class means. It is minimized
over (scores, a, b) and maximized over alpha, with alpha projected to
stay nonnegative. PESG performs that saddle-point update with optional
weight decay and a proximal pull toward a reference point refreshed at
epoch-decay boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Graph, Var


def lr_from_batch(batch_size: int) -> float:
    """Linear batch-size scaling anchored at 0.3 for batches of 256."""
    if batch_size <= 0:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    return 0.3 * batch_size / 256.0


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str  # "cosine" or "step"
    base_lr: float
    total_epochs: int
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in ("cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("base LR must be positive")
        if self.total_epochs <= 0:
            raise ValueError("total epochs must be positive")
        if any(d >= self.total_epochs or d < 0 for d in self.decay_epochs):
            raise ValueError("decay epochs must lie inside [0, total)")


def schedule_lr(config: ScheduleConfig, epoch: int) -> float:
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if config.kind == "cosine":
        return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.total_epochs))
    passed = sum(1 for d in config.decay_epochs if epoch >= d)
    return config.base_lr / config.decay_factor**passed


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> None:
    """In-place SGD with decoupled-style L2: w -= lr * (g + wd * w)."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {w.shape} for {name!r}")
        w -= (lr * (g + weight_decay * w)).astype(w.dtype, copy=False)


# ---------------------------------------------------------------------------
# AUC-margin loss


@dataclass
class AucMState:
    a: float = 0.0
    b: float = 0.0
    alpha: float = 0.0
    margin: float = 1.0
    p_hat: float | None = None  # positive fraction; estimated per batch when None

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.p_hat is not None and not 0.0 < self.p_hat < 1.0:
            raise ValueError("p_hat must lie in (0, 1)")


def aucm_loss(scores: np.ndarray, labels: np.ndarray, state: AucMState) -> tuple[float, dict]:
    """AUC-margin loss and its analytic gradients.

    Returns (loss, grads) with grads under keys "scores", "a", "b", "alpha".
    A single-class batch contributes only its class-conditional terms; an
    empty batch is an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching vectors")
    n = scores.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pos = labels == 1
    neg = labels == 0
    if not np.all(pos | neg):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    p = state.p_hat if state.p_hat is not None else n_pos / n
    a, b, alpha, m = state.a, state.b, state.alpha, state.margin

    loss = 2.0 * alpha * m * p * (1.0 - p) - p * (1.0 - p) * alpha * alpha
    g_scores = np.zeros_like(scores)
    g_a = 0.0
    g_b = 0.0
    g_alpha = 2.0 * m * p * (1.0 - p) - 2.0 * p * (1.0 - p) * alpha

    if n_pos:
        dev = scores[pos] - a
        loss += (1.0 - p) * float(np.mean(dev * dev))
        loss += -2.0 * alpha * (1.0 - p) * float(np.mean(scores[pos]))
        g_scores[pos] = (1.0 - p) * 2.0 * dev / n_pos - 2.0 * alpha * (1.0 - p) / n_pos
        g_a = -2.0 * (1.0 - p) * float(np.mean(dev))
        g_alpha += -2.0 * (1.0 - p) * float(np.mean(scores[pos]))
    if n_neg:
        dev = scores[neg] - b
        loss += p * float(np.mean(dev * dev))
        loss += 2.0 * alpha * p * float(np.mean(scores[neg]))
        g_scores[neg] = p * 2.0 * dev / n_neg + 2.0 * alpha * p / n_neg
        g_b = -2.0 * p * float(np.mean(dev))
        g_alpha += 2.0 * p * float(np.mean(scores[neg]))

    grads = {"scores": g_scores, "a": g_a, "b": g_b, "alpha": g_alpha}
    return float(loss), grads


def aucm_loss_graph(
    g: Graph,
    scores: Var,
    labels: np.ndarray,
    a: Var,
    b: Var,
    alpha: Var,
    margin: float,
    p_hat: float | None = None,
) -> Var:
    """In-graph AUC-margin loss over a score vector node.

    Mirrors aucm_loss so gradients flow into whatever produced the scores;
    a, b, alpha are scalar parameter nodes (shape (1,)).
    """
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos + n_neg == 0:
        raise ValueError("empty batch")
    p = p_hat if p_hat is not None else n_pos / (n_pos + n_neg)

    loss = 2.0 * margin * p * (1.0 - p) * alpha.sum() - p * (1.0 - p) * (alpha * alpha).sum()
    if n_pos:
        mask = g.constant(pos.astype(np.float64))
        mean_pos = (scores * mask).sum() / n_pos
        dev = (scores - a.sum()) * mask
        loss = loss + (1.0 - p) * (dev * dev).sum() / n_pos - 2.0 * (1.0 - p) * alpha.sum() * mean_pos
    if n_neg:
        mask = g.constant(neg.astype(np.float64))
        mean_neg = (scores * mask).sum() / n_neg
        dev = (scores - b.sum()) * mask
        loss = loss + p * (dev * dev).sum() / n_neg + 2.0 * p * alpha.sum() * mean_neg
    return loss


# ---------------------------------------------------------------------------
# PESG


@dataclass(frozen=True)
class PesgConfig:
    lr: float
    weight_decay: float = 0.0
    proximal: float = 0.0  # pull strength toward the epoch reference point
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 10.0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("LR must be positive")


@dataclass
class PesgState:
    """Saddle-point bookkeeping: which keys are centers/duals, plus the proximal anchor."""

    center_names: tuple[str, ...]  # a/b style scalars: descent, no decay, no proximal
    dual_names: tuple[str, ...]  # alpha style scalars: ascent + projection to >= 0
    reference: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def start_epoch(self, params: dict[str, np.ndarray], epoch: int, config: PesgConfig) -> None:
        """Refresh the proximal anchor when crossing an epoch-decay boundary."""
        self.epoch = epoch
        if epoch in config.decay_epochs or not self.reference:
            model_names = set(params) - set(self.center_names) - set(self.dual_names)
            self.reference = {k: params[k].copy() for k in model_names}


def pesg_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: PesgState,
    config: PesgConfig,
    lr: float | None = None,
) -> None:
    """One PESG update, in place.

    Model entries descend with weight decay plus the proximal pull, center
    entries (a, b) descend plainly, dual entries (alpha) ascend and are
    projected back to >= 0. Non-finite gradients abort.
    """
    step = config.lr if lr is None else lr
    for name, gval in grads.items():
        if not np.all(np.isfinite(gval)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    for name, w in params.items():
        g = grads[name]
        if name in state.dual_names:
            w += (step * g).astype(w.dtype, copy=False)
            np.maximum(w, 0.0, out=w)
        elif name in state.center_names:
            w -= (step * g).astype(w.dtype, copy=False)
        else:
            pull = config.proximal * (w - state.reference[name]) if state.reference else 0.0
            w -= (step * (g + config.weight_decay * w + pull)).astype(w.dtype, copy=False)
