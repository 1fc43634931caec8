"""Accuracy, cross-sectional and detection metrics computed from an EvalLog."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .ood import auroc
from .sequence import BUCKET_ORDER, Bucket


class MetricError(ValueError):
    pass


def _nonempty(log):
    if len(log) == 0:
        raise MetricError("empty log")


def overall_accuracy(log) -> float:
    """Fraction of steps whose prediction equals the label.  A sample whose
    class was unseen at prediction time is always counted wrong."""
    _nonempty(log)
    return sum(r.predicted_class == r.true_class for r in log) / len(log)


def per_class_accuracy(log) -> dict[int, float]:
    hits = defaultdict(int)
    totals = defaultdict(int)
    for r in log:
        totals[r.true_class] += 1
        hits[r.true_class] += r.predicted_class == r.true_class
    return {c: hits[c] / totals[c] for c in sorted(totals)}


def mean_per_class(log) -> float:
    _nonempty(log)
    acc = per_class_accuracy(log)
    return sum(acc.values()) / len(acc)


def cross_sectional(log, buckets: dict[int, Bucket]) -> dict[Bucket, float]:
    """Unweighted mean per-class accuracy inside each bucket.  Buckets with
    no classes in the log are left out."""
    _nonempty(log)
    grouped = defaultdict(list)
    for c, a in per_class_accuracy(log).items():
        if c not in buckets:
            raise MetricError(f"class {c} has no bucket")
        grouped[Bucket(buckets[c])].append(a)
    return {b: sum(v) / len(v) for b, v in grouped.items()}


def unseen_auroc(log) -> float:
    return auroc([r.ood_score for r in log], [r.unseen for r in log])


def rolling_accuracy(log, window: int = 1000) -> list[tuple[int, float]]:
    """Trailing-window accuracy at every step that has a full window."""
    if window < 1:
        raise MetricError("window must be at least 1")
    if window > len(log):
        raise MetricError("window longer than the log")
    correct = np.array([r.predicted_class == r.true_class for r in log], dtype=np.int64)
    sums = np.convolve(correct, np.ones(window, dtype=np.int64), mode="valid")
    steps = [r.step for r in log][window - 1:]
    return [(int(s), int(v) / window) for s, v in zip(steps, sums)]


@dataclass
class MetricReport:
    overall_accuracy: float
    mean_per_class: float
    bucket_accuracies: dict = field(default_factory=dict)
    unseen_auroc: float | None = None
    total_macs: int = 0
    rolling: list = field(default_factory=list)

    @property
    def total_gmacs(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "mean_per_class": self.mean_per_class,
            "bucket_accuracies": {Bucket(b).value: v for b, v in self.bucket_accuracies.items()},
            "unseen_auroc": self.unseen_auroc,
            "total_macs": self.total_macs,
            "total_gmacs": self.total_gmacs,
            "rolling": [list(p) for p in self.rolling],
        }

    @classmethod
    def from_dict(cls, doc) -> "MetricReport":
        return cls(
            overall_accuracy=doc["overall_accuracy"],
            mean_per_class=doc["mean_per_class"],
            bucket_accuracies={Bucket(b): v for b, v in doc["bucket_accuracies"].items()},
            unseen_auroc=doc["unseen_auroc"],
            total_macs=doc["total_macs"],
            rolling=[tuple(p) for p in doc["rolling"]],
        )


def build_report(log, buckets, total_macs: int, window: int = 1000) -> MetricReport:
    unseen = [r.unseen for r in log]
    detect = unseen_auroc(log) if any(unseen) and not all(unseen) else None
    return MetricReport(
        overall_accuracy=overall_accuracy(log),
        mean_per_class=mean_per_class(log),
        bucket_accuracies={b: v for b, v in sorted(cross_sectional(log, buckets).items(),
                                                   key=lambda kv: BUCKET_ORDER.index(kv[0]))},
        unseen_auroc=detect,
        total_macs=int(total_macs),
        rolling=rolling_accuracy(log, min(window, len(log))),
    )


def write_rolling_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "accuracy"])
        w.writerows(points)
