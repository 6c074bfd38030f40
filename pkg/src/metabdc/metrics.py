"""AUROC evaluation: binary, one-vs-rest multiclass, episode aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ = s-), via mid-ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be matching vectors")
    pos = labels == 1
    neg = labels == 0
    if not np.all(pos | neg):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based mid-rank shared across the tie run
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_multiclass_ovr(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class one-vs-rest AUROC.

    Column k of `scores` ranks class k against the rest. Classes absent
    from `labels` are skipped and reported via logging.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"need (n, K) scores aligned with n labels, got {scores.shape} and {labels.shape}")
    present = sorted(set(int(l) for l in labels))
    if len(present) < 2:
        raise ValueError("multiclass AUROC needs at least 2 classes present")
    skipped = [k for k in range(scores.shape[1]) if k not in present]
    if skipped:
        log.warning("auroc_multiclass_ovr: classes %s absent from labels, skipped", skipped)
    per_class = [auroc_binary(scores[:, k], (labels == k).astype(np.int64)) for k in present]
    return float(np.mean(per_class))


@dataclass(frozen=True)
class AggregateResult:
    mean: float
    std: float
    repeat_means: tuple[float, ...]


def aggregate_episode_metrics(per_repeat: list[list[float]]) -> AggregateResult:
    """Mean over episodes within each repeat, then mean and std across repeats.

    Std is the population std (ddof=0) so one repeat aggregates to std 0.
    """
    if not per_repeat or any(len(r) == 0 for r in per_repeat):
        raise ValueError("need at least one episode in every repeat")
    repeat_means = tuple(float(np.mean(r)) for r in per_repeat)
    return AggregateResult(
        mean=float(np.mean(repeat_means)),
        std=float(np.std(repeat_means)),
        repeat_means=repeat_means,
    )
