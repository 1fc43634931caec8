"""Multiply-accumulate accounting.

Conventions:

* scoring ``k`` class vectors against a ``d``-dim feature costs ``d * k``;
  heads that normalise the input (cosine head, cosine Exemplar Tuning,
  cosine NCM) pay ``d`` more;
* an MLP forward pass costs the sum of ``in * out`` over its layers;
* one optimizer step costs three forward passes of the trained part of the
  model per sample (forward, plus backward counted as two forwards);
* a centroid update costs ``d``;
* frozen features are cached, so they are never re-metered during training.
"""
from __future__ import annotations

from dataclasses import dataclass


def mlp_macs(sizes) -> int:
    return sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))


_NORMALISING = {("cosine", None), ("exemplar", "cosine"), ("ncm", "cosine")}


def meter_inference(kind: str, d: int, k: int, similarity: str | None = None, layers=None) -> int:
    """MACs to score one sample.

    ``kind`` is a head kind (``linear``, ``cosine``, ``exemplar``, ``ncm``)
    or a feature-map kind (``frozen``, ``mlp`` with ``layers`` widths).
    """
    if kind == "frozen":
        return 0
    if kind == "mlp":
        return mlp_macs(layers)
    if kind not in ("linear", "cosine", "exemplar", "ncm"):
        raise ValueError(f"unknown model kind {kind!r}")
    sim = None if kind in ("linear", "cosine") else (similarity or "dot")
    extra = d if (kind, sim) in _NORMALISING else 0
    return d * k + extra


def meter_ood(scorer: str, d: int, k: int) -> int:
    """Extra MACs an OOD scorer spends beyond the class prediction."""
    if scorer == "max_softmax":
        return 0
    if scorer == "mdt_euclidean":
        return d * k
    if scorer == "mdt_cosine":
        return d * k + d
    raise ValueError(f"unknown ood scorer {scorer!r}")


def meter_training(step_kind: str, batch_size: int, forward_macs: int) -> int:
    """MACs for one training event.

    ``optimizer_step`` and ``fisher``: 3 x forward x samples.
    ``teacher``: a plain forward per sample.
    ``centroid``: ``forward_macs`` is the feature dimension, per sample.
    """
    if step_kind in ("optimizer_step", "fisher"):
        return 3 * forward_macs * batch_size
    if step_kind in ("teacher", "centroid"):
        return forward_macs * batch_size
    raise ValueError(f"unknown training step kind {step_kind!r}")


@dataclass
class MacMeter:
    """Monotone MAC counter with an inference/training split."""

    inference: int = 0
    training: int = 0

    @property
    def total(self) -> int:
        return self.inference + self.training

    @property
    def gmacs(self) -> float:
        return self.total / 1e9

    def add_inference(self, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC counts are non-negative")
        self.inference += int(macs)

    def add_training(self, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC counts are non-negative")
        self.training += int(macs)

    def to_dict(self) -> dict:
        return {"total": self.total, "inference": self.inference,
                "training": self.training, "gmacs": self.gmacs}
