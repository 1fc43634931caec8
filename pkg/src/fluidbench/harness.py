"""Predict-then-label streaming loop with compute metering."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .compute import MacMeter, meter_inference, meter_ood, meter_training
from .dataset import Dataset
from .learners import UNSEEN
from .ood import score_sample
from .sequence import StreamTask
from .training import UpdateStrategy, batch_sizes, run_offline_phase

__all__ = [
    "EvalLog", "EvalRecord", "HarnessError", "MacMeter", "UNSEEN", "meter_inference",
    "meter_training", "recompute_macs", "run_stream",
]


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    step: int
    true_class: int
    predicted_class: int  # UNSEEN when no known class could be scored
    unseen: bool
    ood_score: float
    known_count: int

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.true_class

    def to_json(self) -> str:
        doc = asdict(self)
        if doc["predicted_class"] == UNSEEN:
            doc["predicted_class"] = None
        return json.dumps(doc)

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        doc = json.loads(line)
        if doc["predicted_class"] is None:
            doc["predicted_class"] = UNSEEN
        return cls(**doc)


class EvalLog(list):
    """Stream-ordered list of ``EvalRecord``."""

    def append(self, record):
        if self and record.step <= self[-1].step:
            raise HarnessError("records must be appended in stream order")
        super().append(record)

    def to_ndjson(self) -> str:
        return "".join(r.to_json() + "\n" for r in self)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ndjson())

    @classmethod
    def read(cls, path) -> "EvalLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    log.append(EvalRecord.from_json(line))
        return log

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self])


def run_stream(task: StreamTask, dataset: Dataset, learner, strategy: UpdateStrategy,
               ood_scorer: str = "mdt_cosine", seed: int = 0, batch_size: int | None = None,
               meter: MacMeter | None = None):
    """Run one stream; returns ``(EvalLog, MacMeter)``.

    Per step: predict and score (metered as inference), record, buffer the
    sample, admit a new class, then let the update strategy act (metered
    as training).
    """
    if learner.fmap.input_dim != dataset.dim:
        raise HarnessError(
            f"learner expects {learner.fmap.input_dim}-dim input, dataset has {dataset.dim}")
    order = np.asarray(task.order)
    if len(order) and (order.min() < 0 or order.max() >= len(dataset)):
        raise HarnessError("stream index out of range for dataset")
    batch_size = batch_size or learner.spec.batch_size
    meter = meter if meter is not None else MacMeter()
    rng = np.random.default_rng(seed)
    known = set(learner.known)
    feat_dim = learner.fmap.output_dim
    X_buf = np.empty((len(order), dataset.dim))
    y_buf = np.empty(len(order), dtype=np.int64)
    log = EvalLog()
    for step, idx in enumerate(order):
        x = dataset.features[idx]
        y = int(dataset.labels[idx])
        inf = learner.infer(x)
        k = len(learner.known)
        score = score_sample(ood_scorer, learner.representations(), inf.features, inf.probs)
        meter.add_inference(learner.inference_macs() + meter_ood(ood_scorer, feat_dim, k))
        unseen = y not in known
        log.append(EvalRecord(step, y, int(inf.predicted), unseen, float(score), k))
        X_buf[step] = x
        y_buf[step] = y
        if unseen:
            learner.admit(y, inf.features)
            known.add(y)
        position = step + 1
        if strategy.instance_due(position):
            meter.add_training(learner.instance_update(inf.features, y))
        run_offline_phase(learner, X_buf[:position], y_buf[:position], strategy, meter,
                          position, rng, batch_size)
    return log, meter


def recompute_macs(log: EvalLog, profile: dict, strategy: UpdateStrategy, batch_size: int,
                   ood_scorer: str = "mdt_cosine") -> dict:
    """MAC totals rebuilt from a log and a learner's cost profile alone."""
    d = profile["feature_dim"]
    kind = profile["head_kind"]
    sim = profile["similarity"]
    scorer = ood_scorer
    inference = 0
    training = 0
    for r in log:
        k = r.known_count
        inference += profile["map_macs"] + meter_inference(kind, d, k, sim) + meter_ood(scorer, d, k)
        k_after = k + (1 if r.unseen else 0)
        position = r.step + 1
        if strategy.instance_due(position):
            training += profile["instance_macs"]
        if strategy.offline_due(position):
            fwd = meter_inference(kind, d, k_after, sim)
            if profile["train_map"]:
                fwd += profile["map_macs"]
            if profile["fisher_samples"]:
                training += meter_training("fisher", profile["fisher_samples"], fwd)
            for _ in range(strategy.epochs):
                for b in batch_sizes(position, batch_size):
                    training += meter_training("optimizer_step", b, fwd)
                    training += meter_training("teacher", b, profile["teacher_macs"])
    return {"inference": inference, "training": training, "total": inference + training}
