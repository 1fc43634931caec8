"""Unseen-class scoring and detection metrics.

All scores are oriented so that larger means more likely to come from a
class the learner has not seen.
"""
from __future__ import annotations

import csv
import sys

import numpy as np

from . import kernels

# score recorded when there is nothing to compare against
NO_REPRESENTATION_SCORE = sys.float_info.max


class OodError(ValueError):
    pass


def mdt_score(reps, x, metric: str = "euclidean") -> float:
    """Minimum-distance score: distance to the nearest class vector, or the
    negated best similarity for ``metric="cosine"``."""
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    if reps.shape[0] == 0 or reps.size == 0:
        raise OodError("no class representations")
    x = np.asarray(x, dtype=np.float64)
    if metric == "euclidean":
        return float(np.sqrt(max(kernels.sq_dists(reps, x).min(), 0.0)))
    if metric == "cosine":
        norms = np.linalg.norm(reps, axis=1) * np.linalg.norm(x)
        dots = kernels.dot_rows(reps, x)
        sims = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
        return float(-sims.max())
    raise OodError(f"unknown metric {metric!r}")


def max_softmax_score(probs, atol: float = 1e-6) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        return 1.0
    if abs(probs.sum() - 1.0) > atol or np.any(probs < 0):
        raise OodError("probabilities must be non-negative and sum to one")
    return float(1.0 - probs.max())


def _check_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise OodError("one label per score is required")
    return scores, labels


def auroc(scores, labels) -> float:
    """P(unseen score > seen score) + half the tie probability.

    ``labels`` are truthy for unseen samples.  Rank-sum (Mann-Whitney)
    computation with mid-ranks for ties.
    """
    scores, labels = _check_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OodError("AUROC needs both unseen and seen samples")
    rank_sum = kernels.positive_rank_sum(scores, labels)
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def best_f1(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds ``{-inf} U scores`` (positive iff score > t).

    Returns ``(threshold, f1)``; the lowest maximising threshold wins.
    """
    scores, labels = _check_labels(scores, labels)
    if not labels.any():
        raise OodError("F1 needs at least one unseen sample")
    thresholds, f1 = kernels.f1_sweep(scores, labels)
    i = int(np.argmax(f1))
    return float(thresholds[i]), float(f1[i])


def roc_points(scores, labels):
    """ROC curve as ``(fpr, tpr, threshold)`` rows, from the strictest
    threshold down; a sample is flagged when its score is >= threshold."""
    scores, labels = _check_labels(scores, labels)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OodError("ROC needs both unseen and seen samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[s[1:] != s[:-1], True]
    rows = [(0.0, 0.0, float("inf"))]
    rows += [(fp[i] / n_neg, tp[i] / n_pos, float(s[i])) for i in np.flatnonzero(last)]
    return rows


def write_roc_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        w.writerows(rows)


SCORERS = ("mdt_cosine", "mdt_euclidean", "max_softmax")


def score_sample(scorer: str, reps, features, probs) -> float:
    """Dispatch on scorer name; empty representation sets give the
    maximal score."""
    if scorer == "max_softmax":
        return max_softmax_score(probs)
    if scorer in ("mdt_cosine", "mdt_euclidean"):
        if reps is None or len(reps) == 0:
            return NO_REPRESENTATION_SCORE
        return mdt_score(reps, features, scorer.split("_", 1)[1])
    raise OodError(f"unknown scorer {scorer!r}")
