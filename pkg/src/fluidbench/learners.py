"""Streaming learners built from a feature map, a head and a training rule.

The harness drives every learner through the same hooks:

``infer(x)``            predict before the label is revealed
``admit(c, f)``         grow the known set with a newly revealed class
``instance_update``     cheap per-sample update (centroids)
``begin_offline`` /
``train_step``          batch training phases

Hooks that do work return the MACs they spent.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .compute import meter_inference, meter_training
from .heads import (
    CentroidStore,
    CosineHead,
    ExemplarTuningHead,
    FeatureMap,
    HeadError,
    NcmHead,
    Similarity,
    imprint_weights,
    softmax,
)
from .training import (
    EwcState,
    Network,
    SgdState,
    ewc_penalty,
    fisher_estimate,
    lwf_loss_and_grad,
    pretrain_prototypical,
    sgd_step,
    supervised_pretrain,
    xent_from_logits,
    xent_loss_and_grad,
)

UNSEEN = -1

LEARNER_KINDS = ("ncm", "finetune", "standard", "imprint", "exemplar", "lwf", "ewc", "proto")


@dataclass
class LearnerSpec:
    """Hyperparameters for one learner.  ``None`` learning rate means the
    kind's default (0.1 for head-only training, 0.01 when the backbone
    trains)."""

    kind: str = "exemplar"
    backbone: list = field(default_factory=list)  # hidden/output widths; [] = frozen identity
    lr: float | None = None
    momentum: float = 0.9
    batch_size: int = 64
    temperature: float = 4.0  # cosine head initial scale
    ewc_lambda: float = 100.0
    lwf_temperature: float = 2.0
    et_similarity: str = "dot"
    ncm_metric: str = "euclidean"
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.05
    holdout_fraction: float = 0.1
    proto_way: int = 30
    proto_shot: int = 5
    proto_query: int = 5
    proto_epochs: int = 100
    proto_episodes: int = 10
    proto_lr: float = 0.01
    proto_decay_every: int = 40

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        Similarity(self.et_similarity)
        Similarity(self.ncm_metric)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def trains_backbone(self) -> bool:
        return self.kind in ("standard", "lwf", "ewc") and bool(self.backbone)

    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if self.kind in ("standard", "lwf", "ewc") else 0.1


@dataclass
class Inference:
    predicted: int
    probs: np.ndarray
    features: np.ndarray
    logits: np.ndarray


def _holdout_split(n, fraction, rng):
    perm = rng.permutation(n)
    n_hold = int(math.floor(n * fraction)) if n > 1 else 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


class Learner:
    kind = "base"
    needs_linear_pretraining = False

    def __init__(self, spec: LearnerSpec, input_dim: int, rng):
        self.spec = spec
        self.rng = rng
        if spec.backbone:
            self.fmap = FeatureMap.mlp([input_dim, *spec.backbone], rng)
        else:
            self.fmap = FeatureMap.frozen(input_dim)
        self.head = None
        self.net = None
        self.opt = SgdState(spec.learning_rate(), spec.momentum)
        self.holdout = (np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64))

    # -- setup -------------------------------------------------------------

    def pretrain(self, X, y):
        """Pretraining phase on the pretrain classes (not metered)."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        classes = sorted(set(y.tolist()))
        tr, ho = _holdout_split(len(y), self.spec.holdout_fraction, self.rng)
        self.holdout = (X[ho], y[ho])
        Xtr, ytr = X[tr], y[tr]
        head0 = None
        if self.fmap.layers or self.needs_linear_pretraining:
            head0 = supervised_pretrain(
                self.fmap, Xtr, ytr, classes, self.rng, train_map=bool(self.fmap.layers),
                epochs=self.spec.pretrain_epochs, lr=self.spec.pretrain_lr,
                batch_size=self.spec.batch_size, momentum=self.spec.momentum)
        self._setup(head0, Xtr, ytr, classes)
        return self

    def _setup(self, head0, X, y, classes):
        raise NotImplementedError

    # -- stream hooks ------------------------------------------------------

    @property
    def known(self) -> list[int]:
        return self.head.classes

    def infer(self, x) -> Inference:
        f = self.fmap(x)
        empty = np.zeros(0)
        if len(self.head) == 0:
            return Inference(UNSEEN, empty, f, empty)
        try:
            logits = self.head.score(f)
        except HeadError:
            return Inference(UNSEEN, empty, f, empty)
        if not np.isfinite(logits).any():
            return Inference(UNSEEN, empty, f, logits)
        return Inference(self.head.classes[int(np.argmax(logits))], softmax(logits), f, logits)

    def inference_macs(self) -> int:
        return self.fmap.macs() + self.head_macs(len(self.head))

    def head_macs(self, k: int) -> int:
        return meter_inference(self.head.kind, self.fmap.output_dim, k, self._similarity())

    def _similarity(self):
        return None

    def representations(self) -> np.ndarray:
        return self.head.representations()

    def admit(self, class_id: int, features) -> None:
        self.head.admit(class_id)

    def instance_update(self, features, class_id: int) -> int:
        return 0

    def begin_offline(self, X, y) -> int:
        return 0

    def train_step(self, X, y) -> int:
        return 0

    def trained_forward_macs(self, k: int) -> int:
        return self.head_macs(k)

    def cost_profile(self) -> dict:
        """Static quantities needed to recompute the MAC total from a log."""
        return {
            "map_macs": self.fmap.macs(),
            "feature_dim": self.fmap.output_dim,
            "head_kind": self.head.kind,
            "similarity": self._similarity(),
            "train_map": False,
            "teacher_macs": 0,
            "fisher_samples": 0,
            "instance_macs": 0,
        }

    def checkpoint(self) -> dict:
        return {"kind": self.kind, "feature_map": self.fmap.to_dict(), "head": self.head.to_dict()}


class NcmLearner(Learner):
    kind = "ncm"

    def _setup(self, head0, X, y, classes):
        self.head = NcmHead(self.fmap.output_dim, self.spec.ncm_metric)
        for c in classes:
            self.head.admit(c)
        self.head.store.add_batch(self.fmap(X), y)

    def _similarity(self):
        return self.spec.ncm_metric

    def representations(self):
        store = self.head.store
        return store.centroids()[store.active]

    def instance_update(self, features, class_id):
        self.head.observe(class_id, features)
        return meter_training("centroid", 1, self.fmap.output_dim)

    def cost_profile(self):
        return {**super().cost_profile(), "instance_macs": self.fmap.output_dim}


class ProtoLearner(NcmLearner):
    """Nearest class mean over a backbone meta-trained on episodes."""

    kind = "proto"

    def pretrain(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if self.fmap.layers:
            s = self.spec
            pretrain_prototypical(
                self.fmap, X, y, self.rng, n_way=s.proto_way, n_shot=s.proto_shot,
                n_query=s.proto_query, epochs=s.proto_epochs,
                episodes_per_epoch=s.proto_episodes, lr=s.proto_lr,
                decay_every=s.proto_decay_every, momentum=s.momentum)
        self._setup(None, X, y, sorted(set(y.tolist())))
        return self


class LinearLearner(Learner):
    """Linear head trained with cross-entropy; ``standard`` also trains the
    backbone, ``finetune`` keeps it frozen."""

    kind = "finetune"
    needs_linear_pretraining = True

    def _setup(self, head0, X, y, classes):
        self.head = head0
        self.net = Network(self.fmap, self.head, train_map=self.spec.trains_backbone)

    def train_step(self, X, y):
        _, grads = xent_loss_and_grad(self.net, X, y)
        sgd_step(self.net.params(), grads, self.opt)
        return meter_training("optimizer_step", len(y), self.trained_forward_macs(len(self.head)))

    def trained_forward_macs(self, k):
        return (self.fmap.macs() if self.net.train_map else 0) + self.head_macs(k)

    def cost_profile(self):
        return {**super().cost_profile(), "train_map": self.net.train_map}


class StandardLearner(LinearLearner):
    kind = "standard"


class LwfLearner(LinearLearner):
    """Standard training plus distillation from the post-pretraining model."""

    kind = "lwf"

    def _setup(self, head0, X, y, classes):
        super()._setup(head0, X, y, classes)
        self.teacher = Network(self.fmap.copy(), copy.deepcopy(head0))
        self.seen: set[int] = set()

    def teacher_macs(self) -> int:
        return self.teacher.forward_macs()

    def begin_offline(self, X, y):
        self.seen = set(np.asarray(y).tolist())
        return 0

    def train_step(self, X, y):
        Z, cache = self.net.forward(X)
        Zt, _ = self.teacher.forward(X)
        pairs = [(self.head.row_of[c], i) for i, c in enumerate(self.teacher.head.classes)
                 if c in self.seen and c in self.head.row_of]
        rows = self.head.rows(y)
        if pairs:
            _, dZ = lwf_loss_and_grad(Z, Zt, self.spec.lwf_temperature, rows, pairs)
        else:
            _, dZ = xent_from_logits(Z, rows)
        sgd_step(self.net.params(), self.net.backward(dZ, cache), self.opt)
        k = len(self.head)
        return (meter_training("optimizer_step", len(y), self.trained_forward_macs(k))
                + meter_training("teacher", len(y), self.teacher_macs()))

    def cost_profile(self):
        return {**super().cost_profile(), "teacher_macs": self.teacher_macs()}


class EwcLearner(LinearLearner):
    """Standard training plus a Fisher-weighted pull toward the
    post-pretraining parameters; the Fisher diagonal is re-estimated on
    held-out pretrain samples at the start of every training phase."""

    kind = "ewc"

    def _setup(self, head0, X, y, classes):
        super()._setup(head0, X, y, classes)
        self.n_anchor_rows = len(head0)
        self.anchor = {k: v.copy() for k, v in self._anchored_params().items()}
        self.ewc = EwcState(self.anchor, {k: np.zeros_like(v) for k, v in self.anchor.items()},
                            self.spec.ewc_lambda)

    def _anchored_params(self):
        m = self.n_anchor_rows
        out = {}
        for k, v in self.net.params().items():
            out[k] = v[:m] if k.startswith("head.") else v
        return out

    def begin_offline(self, X, y):
        Xh, yh = self.holdout
        if len(yh) == 0:
            return 0
        fisher = fisher_estimate(self.net, Xh, yh)
        m = self.n_anchor_rows
        self.ewc.fisher = {k: (fisher[k][:m] if k.startswith("head.") else fisher[k])
                           for k in self.anchor}
        return meter_training("fisher", len(yh), self.trained_forward_macs(len(self.head)))

    def train_step(self, X, y):
        _, grads = xent_loss_and_grad(self.net, X, y)
        _, pgrads = ewc_penalty(self._anchored_params(), self.ewc)
        m = self.n_anchor_rows
        for k, g in pgrads.items():
            if k.startswith("head."):
                grads[k][:m] += g
            else:
                grads[k] += g
        sgd_step(self.net.params(), grads, self.opt)
        return meter_training("optimizer_step", len(y), self.trained_forward_macs(len(self.head)))

    def cost_profile(self):
        return {**super().cost_profile(), "fisher_samples": len(self.holdout[1])}


class ImprintLearner(Learner):
    """Cosine classifier whose rows track class centroids until fine-tuning
    takes over."""

    kind = "imprint"
    min_temperature = 1e-6

    def _setup(self, head0, X, y, classes):
        d = self.fmap.output_dim
        self.store = CentroidStore(d)
        self.head = CosineHead(d, self.spec.temperature)
        for c in classes:
            self.head.admit(c)
            self.store.admit(c)
        self.store.add_batch(self.fmap(X), y)
        imprint_weights(self.head, self.store)
        self.net = Network(self.fmap, self.head)

    def admit(self, class_id, features):
        self.head.admit(class_id, features)
        self.store.admit(class_id)

    def instance_update(self, features, class_id):
        self.store.add(class_id, features)
        row = self.store.row_of[class_id]
        self.head.W[self.head.row_of[class_id]] = self.store.centroids()[row]
        return meter_training("centroid", 1, self.fmap.output_dim)

    def train_step(self, X, y):
        _, grads = xent_loss_and_grad(self.net, X, y)
        sgd_step(self.net.params(), grads, self.opt)
        np.maximum(self.head.s, self.min_temperature, out=self.head.s)
        return meter_training("optimizer_step", len(y), self.trained_forward_macs(len(self.head)))

    def cost_profile(self):
        return {**super().cost_profile(), "instance_macs": self.fmap.output_dim}


class ExemplarLearner(Learner):
    """Normalised-feature class means plus residuals trained by SGD."""

    kind = "exemplar"

    def _setup(self, head0, X, y, classes):
        self.head = ExemplarTuningHead(self.fmap.output_dim, self.spec.et_similarity)
        for c in classes:
            self.head.admit(c)
        F = self.fmap(X)
        for f, c in zip(F, y):
            if np.any(f):
                self.head.observe(int(c), f)
        self.net = Network(self.fmap, self.head)

    def _similarity(self):
        return self.spec.et_similarity

    def representations(self):
        return self.head.class_vectors()[self.head.store.active]

    def instance_update(self, features, class_id):
        # all-zero ReLU features carry no direction; the centroid skips them
        if np.any(features):
            self.head.observe(class_id, features)
        return meter_training("centroid", 1, self.fmap.output_dim)

    def train_step(self, X, y):
        _, grads = xent_loss_and_grad(self.net, X, y)
        sgd_step(self.net.params(), grads, self.opt)
        return meter_training("optimizer_step", len(y), self.trained_forward_macs(len(self.head)))

    def cost_profile(self):
        return {**super().cost_profile(), "instance_macs": self.fmap.output_dim}


_CLASSES = {
    "ncm": NcmLearner,
    "proto": ProtoLearner,
    "finetune": LinearLearner,
    "standard": StandardLearner,
    "lwf": LwfLearner,
    "ewc": EwcLearner,
    "imprint": ImprintLearner,
    "exemplar": ExemplarLearner,
}


def build_learner(spec: LearnerSpec, input_dim: int, seed: int = 0) -> Learner:
    return _CLASSES[spec.kind](spec, input_dim, np.random.default_rng(seed))
