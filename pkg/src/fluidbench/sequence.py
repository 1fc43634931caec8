"""Heavy-tailed (Zipfian) stream construction and head/tail bucketing."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, Role


class SequenceError(ValueError):
    pass


class Bucket(str, enum.Enum):
    NOVEL_HEAD = "novel_head"
    PRETRAIN_HEAD = "pretrain_head"
    NOVEL_TAIL = "novel_tail"
    PRETRAIN_TAIL = "pretrain_tail"


# column order used by reports
BUCKET_ORDER = (Bucket.NOVEL_HEAD, Bucket.PRETRAIN_HEAD, Bucket.NOVEL_TAIL, Bucket.PRETRAIN_TAIL)

# sequence statistics of the five reference ImageNet-22K sequences:
# (number of images, min per class, max per class)
REFERENCE_SEQUENCES = {
    1: (89030, 1, 961),
    2: (87549, 21, 961),
    3: (90133, 14, 961),
    4: (86988, 6, 892),
    5: (89921, 10, 961),
}


@dataclass(frozen=True)
class SequenceSpec:
    num_classes: int
    total_samples: int
    zipf_s: float = 1.0
    head_threshold: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise SequenceError("num_classes must be at least 1")
        if self.total_samples < self.num_classes:
            raise SequenceError("total_samples must be at least num_classes")
        if not self.zipf_s > 0:
            raise SequenceError("zipf_s must be positive")


def bucket_of(class_id: int, count: int, role, head_threshold: int = 50) -> Bucket:
    """Head classes have strictly more than ``head_threshold`` samples."""
    head = count > head_threshold
    if Role(role) is Role.PRETRAIN:
        return Bucket.PRETRAIN_HEAD if head else Bucket.PRETRAIN_TAIL
    return Bucket.NOVEL_HEAD if head else Bucket.NOVEL_TAIL


def zipf_pmf(num_classes: int, s: float = 1.0) -> np.ndarray:
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** -s
    return w / w.sum()


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Floors first, then hands the leftover units to the largest fractional
    remainders (earlier index wins ties).
    """
    quota = weights / weights.sum() * total
    counts = np.floor(quota).astype(np.int64)
    left = total - int(counts.sum())
    if left:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:left]] += 1
    return counts


def zipf_targets(num_classes: int, total: int, s: float = 1.0) -> np.ndarray:
    return largest_remainder(zipf_pmf(num_classes, s), total)


def cap_and_redistribute(targets: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Cap rank targets at availability, pushing each deficit to later ranks.

    Any deficit still left after the last rank is placed on the
    highest-ranked classes that have spare samples.
    """
    counts = np.zeros_like(targets)
    carry = 0
    for r in range(len(targets)):
        want = targets[r] + carry
        counts[r] = min(want, available[r])
        carry = want - counts[r]
    for r in range(len(targets)):
        if carry == 0:
            break
        extra = min(carry, available[r] - counts[r])
        counts[r] += extra
        carry -= extra
    if carry:
        raise SequenceError("not enough stream samples to reach total_samples")
    return counts


@dataclass
class StreamTask:
    """A concrete stream: sample order plus per-class counts and buckets."""

    order: np.ndarray
    class_counts: dict[int, int]
    buckets: dict[int, Bucket]
    spec: SequenceSpec | None = None
    ranks: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.order)

    def to_json(self) -> str:
        doc = {
            "order": [int(i) for i in self.order],
            "class_counts": {str(c): int(n) for c, n in sorted(self.class_counts.items())},
            "buckets": {str(c): b.value for c, b in sorted(self.buckets.items())},
            "ranks": [int(c) for c in self.ranks],
            "spec": asdict(self.spec) if self.spec else None,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StreamTask":
        doc = json.loads(text)
        spec = SequenceSpec(**doc["spec"]) if doc.get("spec") else None
        return cls(
            order=np.array(doc["order"], dtype=np.int64),
            class_counts={int(c): int(n) for c, n in doc["class_counts"].items()},
            buckets={int(c): Bucket(b) for c, b in doc["buckets"].items()},
            spec=spec,
            ranks=[int(c) for c in doc.get("ranks", [])],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "StreamTask":
        return cls.from_json(Path(path).read_text())


def build_sequence(dataset: Dataset, spec: SequenceSpec) -> StreamTask:
    rng = np.random.default_rng(spec.seed)
    pool = dataset.stream_pool
    pool_labels = dataset.labels[pool]
    candidates = [c for c in range(dataset.num_classes) if np.any(pool_labels == c)]
    if len(candidates) < spec.num_classes:
        raise SequenceError(
            f"{spec.num_classes} classes requested but only {len(candidates)} have stream samples"
        )
    # rank r goes to ranks[r]; class choice and rank assignment are uniform
    ranks = [int(c) for c in rng.permutation(candidates)[: spec.num_classes]]
    available = np.array([np.sum(pool_labels == c) for c in ranks], dtype=np.int64)
    if available.sum() < spec.total_samples:
        raise SequenceError(
            f"only {available.sum()} stream samples available for {spec.total_samples} requested"
        )
    targets = zipf_targets(spec.num_classes, spec.total_samples, spec.zipf_s)
    counts = cap_and_redistribute(targets, available)
    chosen = []
    for c, n in zip(ranks, counts):
        if n:
            members = pool[pool_labels == c]
            chosen.append(rng.choice(members, size=int(n), replace=False))
    order = rng.permutation(np.concatenate(chosen)).astype(np.int64)
    class_counts = {c: int(n) for c, n in zip(ranks, counts) if n > 0}
    buckets = {
        c: bucket_of(c, n, dataset.class_roles[c], spec.head_threshold)
        for c, n in class_counts.items()
    }
    return StreamTask(order, class_counts, buckets, spec, ranks)


def validate_task(task: StreamTask, dataset: Dataset | None = None) -> None:
    """Raise ``SequenceError`` if ``task`` breaks a StreamTask invariant."""
    if sum(task.class_counts.values()) != len(task.order):
        raise SequenceError("class counts do not sum to the stream length")
    if set(task.buckets) != set(task.class_counts):
        raise SequenceError("every streamed class needs exactly one bucket")
    if len(np.unique(task.order)) != len(task.order):
        raise SequenceError("stream repeats a sample index")
    if dataset is None:
        return
    if len(task.order) and (task.order.min() < 0 or task.order.max() >= len(dataset)):
        raise SequenceError("stream index out of range for dataset")
    if np.isin(task.order, dataset.pretrain_pool).any():
        raise SequenceError("stream uses samples reserved for pretraining")
    labels, realized = np.unique(dataset.labels[task.order], return_counts=True)
    if dict(zip(labels.tolist(), realized.tolist())) != task.class_counts:
        raise SequenceError("class counts disagree with the labels of the ordered samples")
    threshold = task.spec.head_threshold if task.spec else 50
    for c, n in task.class_counts.items():
        if task.buckets[c] is not bucket_of(c, n, dataset.class_roles[c], threshold):
            raise SequenceError(f"class {c} has an inconsistent bucket")


def sequence_stats(class_counts: dict[int, int]) -> tuple[int, int, int]:
    """(total samples, smallest class count, largest class count)."""
    values = list(class_counts.values())
    return sum(values), min(values), max(values)
