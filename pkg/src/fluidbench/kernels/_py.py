"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``FLUIDBENCH_PURE_PYTHON=1`` is set.
"""
import numpy as np


def dot_rows(mat, x):
    """Return ``mat @ x`` for a (k, d) matrix and a d-vector."""
    return np.asarray(mat, dtype=np.float64) @ np.asarray(x, dtype=np.float64)


def sq_dists(mat, x):
    """Squared Euclidean distance from ``x`` to every row of ``mat``."""
    diff = np.asarray(mat, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def add_row(sums, counts, row, x, scale):
    """In-place ``sums[row] += scale * x; counts[row] += 1``."""
    sums[row] += scale * np.asarray(x, dtype=np.float64)
    counts[row] += 1


def positive_rank_sum(scores, positive):
    """Sum of mid-ranks (1-based, ties averaged) of the positive entries."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # boundaries of runs of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty(len(scores))
    ranks[order] = np.repeat(mid, ends - starts)
    return float(ranks[positive].sum())


def f1_sweep(scores, positive):
    """F1 for every threshold in ``{-inf} U distinct(scores)``.

    A sample is predicted positive when ``score > threshold``.  Returns
    ``(thresholds, f1)`` with thresholds ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    distinct, inverse = np.unique(scores, return_inverse=True)
    pos_per = np.bincount(inverse, weights=positive, minlength=len(distinct))
    all_per = np.bincount(inverse, minlength=len(distinct)).astype(np.float64)
    # predicted positives at threshold distinct[j] are the scores strictly above it
    tp_above = np.r_[np.cumsum(pos_per[::-1])[::-1][1:], 0.0]
    pp_above = np.r_[np.cumsum(all_per[::-1])[::-1][1:], 0.0]
    tp = np.r_[float(n_pos), tp_above]
    pp = np.r_[float(len(scores)), pp_above]
    denom = pp + n_pos
    f1 = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    thresholds = np.r_[-np.inf, distinct]
    return thresholds, f1
