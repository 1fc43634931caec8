"""Losses, gradients, optimizers, regularizers and update schedules."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .compute import meter_inference, meter_training
from .heads import FeatureMap, HeadError, LinearHead, Similarity, log_softmax, softmax


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# network = feature map + head


class Network:
    """Feature map followed by a head; parameter names are prefixed
    ``map.`` and ``head.``.  Only trainable parts appear in ``params``."""

    def __init__(self, fmap: FeatureMap, head, train_map: bool = False, train_head: bool = True):
        self.fmap = fmap
        self.head = head
        self.train_map = train_map
        self.train_head = train_head

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        if self.train_head:
            out.update({f"head.{k}": v for k, v in self.head.params().items()})
        if self.train_map:
            out.update({f"map.{k}": v for k, v in self.fmap.params().items()})
        return out

    def forward(self, X):
        F, acts = self.fmap.forward(X)
        return self.head.logits(F), (F, acts)

    def backward(self, dZ, cache):
        F, acts = cache
        hgrads, dF = self.head.backward(dZ, F)
        grads = {}
        if self.train_head:
            grads.update({f"head.{k}": v for k, v in hgrads.items()})
        if self.train_map:
            grads.update({f"map.{k}": v for k, v in self.fmap.backward(dF, acts).items()})
        return grads

    def head_macs(self) -> int:
        sim = getattr(self.head, "similarity", None) or getattr(self.head, "metric", None)
        return meter_inference(self.head.kind, self.head.dim, len(self.head),
                               sim.value if sim is not None else None)

    def forward_macs(self) -> int:
        return self.fmap.macs() + self.head_macs()

    def trained_forward_macs(self) -> int:
        """Forward cost of the part that must be recomputed while training."""
        return self.forward_macs() if self.train_map else self.head_macs()


def xent_from_logits(Z, rows):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = Z.shape[0]
    logp = log_softmax(Z)
    picked = logp[np.arange(n), rows]
    if not np.all(np.isfinite(picked)):
        raise TrainingError("label refers to a class slot that cannot be scored")
    dZ = softmax(Z)
    dZ[np.arange(n), rows] -= 1.0
    return float(-picked.mean()), dZ / n


def xent_loss_and_grad(network: Network, X, labels):
    """Mean softmax cross-entropy over a batch and gradients of the trainable
    parameters."""
    try:
        rows = network.head.rows(labels)
    except HeadError as exc:
        raise TrainingError(str(exc)) from None
    Z, cache = network.forward(np.atleast_2d(X))
    loss, dZ = xent_from_logits(Z, rows)
    return loss, network.backward(dZ, cache)


# ---------------------------------------------------------------------------
# SGD with momentum


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise TrainingError("momentum must lie in [0, 1)")


def _velocity_for(state: SgdState, name: str, p: np.ndarray) -> np.ndarray:
    v = state.velocity.get(name)
    if v is None:
        return np.zeros_like(p)
    if v.shape == p.shape:
        return v
    # heads grow by whole rows when classes are admitted
    if v.ndim == p.ndim and v.shape[1:] == p.shape[1:] and v.shape[0] < p.shape[0]:
        pad = np.zeros((p.shape[0] - v.shape[0],) + p.shape[1:])
        return np.concatenate([v, pad])
    raise TrainingError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")


def sgd_step(params: dict, grads: dict, state: SgdState) -> dict:
    """``v <- momentum * v + g;  p <- p - lr * v`` (in place)."""
    extra = set(grads) - set(params)
    if extra:
        raise TrainingError(f"gradients for unknown parameters: {sorted(extra)}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise TrainingError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        v = state.momentum * _velocity_for(state, name, p) + g
        state.velocity[name] = v
        p -= state.learning_rate * v
    return params


# ---------------------------------------------------------------------------
# learning without forgetting


def lwf_loss_and_grad(student_logits, teacher_logits, T, hard_rows, pairs):
    """Hard-label cross-entropy plus soft cross-entropy to a teacher.

    ``pairs`` lists ``(student_column, teacher_column)`` for the classes
    both models share and that the stream has shown; only those columns
    enter the distillation term.  Returns ``(loss, dL/dstudent_logits)``.
    """
    S = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    Tl = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    loss, dS = xent_from_logits(S, np.asarray(hard_rows))
    if not pairs:
        warnings.warn("no shared classes between student and teacher; distillation skipped",
                      RuntimeWarning, stacklevel=2)
        return loss, dS
    s_cols = [a for a, _ in pairs]
    t_cols = [b for _, b in pairs]
    p_t = softmax(Tl[:, t_cols] / T)
    logp_s = log_softmax(S[:, s_cols] / T)
    n = S.shape[0]
    loss += float(-(p_t * logp_s).sum(axis=1).mean())
    dS[:, s_cols] += (np.exp(logp_s) - p_t) / (T * n)
    return loss, dS


def lwf_loss(student_logits, teacher_logits, T, hard_rows, pairs=None):
    if pairs is None:
        k = np.atleast_2d(student_logits).shape[1]
        pairs = [(i, i) for i in range(k)]
    return lwf_loss_and_grad(student_logits, teacher_logits, T, hard_rows, pairs)[0]


def distillation_term(student_logits, teacher_logits, T):
    """Soft cross-entropy between tempered teacher and student softmaxes."""
    p_t = softmax(np.atleast_2d(teacher_logits) / T)
    logp_s = log_softmax(np.atleast_2d(student_logits) / T)
    return float(-(p_t * logp_s).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# elastic weight consolidation


def fisher_estimate(network: Network, X, labels) -> dict[str, np.ndarray]:
    """Empirical Fisher diagonal: mean squared per-sample gradient of
    ``log p(y|x)`` for every trainable parameter."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise TrainingError("Fisher estimate needs at least one sample")
    total = {k: np.zeros_like(v) for k, v in network.params().items()}
    for x, y in zip(X, labels):
        _, grads = xent_loss_and_grad(network, x[None], [y])
        for k, g in grads.items():
            total[k] += g * g
    return {k: v / len(X) for k, v in total.items()}


@dataclass
class EwcState:
    anchor: dict
    fisher: dict
    lam: float = 100.0

    def __post_init__(self):
        for k, f in self.fisher.items():
            if np.any(np.asarray(f) < 0):
                raise TrainingError(f"negative Fisher entry for {k}")


def ewc_penalty(params: dict, state: EwcState):
    """``(lam/2) sum F (theta - theta*)^2`` and its gradient ``lam F (theta - theta*)``."""
    penalty = 0.0
    grads = {}
    for name, anchor in state.anchor.items():
        if name not in params:
            raise TrainingError(f"missing parameter {name}")
        p = params[name]
        F = state.fisher[name]
        if p.shape != anchor.shape or F.shape != anchor.shape:
            raise TrainingError(f"shape mismatch for {name}: {p.shape} vs anchor {anchor.shape}")
        delta = p - anchor
        penalty += 0.5 * state.lam * float(np.sum(F * delta * delta))
        grads[name] = state.lam * F * delta
    return penalty, grads


# ---------------------------------------------------------------------------
# prototypical episodes


def _proto_logits(P, Fq, metric):
    if metric is Similarity.EUCLIDEAN:
        diff = P[None, :, :] - Fq[:, None, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        return -dist, (diff, dist)
    if metric is Similarity.DOT:
        return Fq @ P.T, None
    raise TrainingError(f"unsupported prototype metric {metric}")


def proto_episode_loss(fmap: FeatureMap, support, query, query_labels,
                       metric=Similarity.EUCLIDEAN):
    """Soft nearest-prototype loss of one episode.

    ``support`` has shape ``(k_way, n_shot, dim)``; ``query_labels`` index
    the episode classes.  Returns ``(loss, grads)`` where gradients reach the
    map parameters through both prototypes and query embeddings.
    """
    metric = Similarity(metric)
    support = np.asarray(support, dtype=np.float64)
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if support.ndim != 3 or support.shape[1] == 0:
        raise TrainingError("every episode class needs at least one support sample")
    k, n, dim = support.shape
    X = np.concatenate([support.reshape(k * n, dim), query])
    F, acts = fmap.forward(X)
    Fs = F[: k * n].reshape(k, n, -1)
    Fq = F[k * n:]
    P = Fs.mean(axis=1)
    Z, aux = _proto_logits(P, Fq, metric)
    loss, dZ = xent_from_logits(Z, np.asarray(query_labels))
    if metric is Similarity.EUCLIDEAN:
        diff, dist = aux
        unit = diff / np.where(dist > 0, dist, np.inf)[..., None]
        dP = -(dZ[..., None] * unit).sum(axis=0)
        dFq = (dZ[..., None] * unit).sum(axis=1)
    else:
        dP = dZ.T @ Fq
        dFq = dZ @ P
    dFs = np.repeat(dP[:, None, :] / n, n, axis=1).reshape(k * n, -1)
    grads = fmap.backward(np.concatenate([dFs, dFq]), acts)
    return loss, grads


def sample_episode(X, y, classes, n_way, n_shot, n_query, rng):
    """Draw an ``n_way``-way ``n_shot``-shot episode (classes with too few
    samples are skipped)."""
    eligible = [c for c in classes if np.sum(y == c) >= n_shot + n_query]
    if len(eligible) < 2:
        raise TrainingError("not enough classes with enough samples for an episode")
    way = rng.choice(eligible, size=min(n_way, len(eligible)), replace=False)
    support, query, qlab = [], [], []
    for i, c in enumerate(way):
        idx = rng.choice(np.flatnonzero(y == c), size=n_shot + n_query, replace=False)
        support.append(X[idx[:n_shot]])
        query.append(X[idx[n_shot:]])
        qlab.extend([i] * n_query)
    return np.stack(support), np.concatenate(query), np.array(qlab)


def pretrain_prototypical(fmap: FeatureMap, X, y, rng, n_way=30, n_shot=5, n_query=5,
                          epochs=100, episodes_per_epoch=10, lr=0.01, decay_every=40,
                          decay=0.5, momentum=0.9):
    """Episodic meta-training of ``fmap``; the learning rate is multiplied
    by ``decay`` every ``decay_every`` epochs."""
    classes = sorted(set(np.asarray(y).tolist()))
    state = SgdState(lr, momentum)
    history = []
    for epoch in range(epochs):
        state.learning_rate = lr * decay ** (epoch // decay_every)
        for _ in range(episodes_per_epoch):
            s, q, ql = sample_episode(X, y, classes, n_way, n_shot, n_query, rng)
            loss, grads = proto_episode_loss(fmap, s, q, ql)
            if grads:
                sgd_step(fmap.params(), grads, state)
            history.append(loss)
    return history


# ---------------------------------------------------------------------------
# update strategies


@dataclass(frozen=True)
class UpdateStrategy:
    """When a learner updates during the stream.

    ``kind`` is one of ``offline`` (batch training every ``interval``
    samples for ``epochs`` epochs), ``instance`` (per-sample updates),
    ``hybrid`` (both), ``imprint_then_finetune`` (per-sample until
    ``switch_at``, then batch training) or ``none``.
    """

    kind: str = "offline"
    interval: int = 5000
    epochs: int = 4
    switch_at: int = 10000

    KINDS = ("offline", "instance", "hybrid", "imprint_then_finetune", "none")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise TrainingError(f"unknown update strategy {self.kind!r}")
        if self.interval < 1 or self.epochs < 1 or self.switch_at < 0:
            raise TrainingError("interval and epochs must be at least 1")

    @classmethod
    def offline_every(cls, interval=5000, epochs=4):
        return cls("offline", interval, epochs)

    @classmethod
    def instance_per_sample(cls):
        return cls("instance")

    @classmethod
    def hybrid(cls, interval=5000, epochs=4):
        return cls("hybrid", interval, epochs)

    @classmethod
    def imprint_then_finetune(cls, switch_at=10000, interval=5000, epochs=4):
        return cls("imprint_then_finetune", interval, epochs, switch_at)

    def instance_due(self, position: int) -> bool:
        """``position`` is the number of stream samples seen so far."""
        if self.kind in ("instance", "hybrid"):
            return True
        if self.kind == "imprint_then_finetune":
            return position < self.switch_at
        return False

    def offline_due(self, position: int) -> bool:
        if self.kind in ("offline", "hybrid"):
            return position > 0 and position % self.interval == 0
        if self.kind == "imprint_then_finetune":
            return position >= self.switch_at and (position - self.switch_at) % self.interval == 0
        return False


def scaled_switch_point(total_samples: int, switch_at: int = 10000, reference: int = 90000) -> int:
    """Shrink the imprinting switch point in proportion to a short stream."""
    if total_samples >= reference:
        return switch_at
    return int(round(total_samples * switch_at / reference))


def batch_sizes(n: int, batch_size: int) -> list[int]:
    full, rest = divmod(n, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def run_offline_phase(learner, X_buf, y_buf, strategy: UpdateStrategy, meter, position: int,
                      rng, batch_size: int = 64) -> int:
    """Epoch-wise minibatch training over the whole buffer when the
    schedule fires at ``position``.  Returns the number of optimizer steps."""
    if not strategy.offline_due(position) or len(y_buf) == 0:
        return 0
    X_buf = np.asarray(X_buf)
    y_buf = np.asarray(y_buf)
    meter.add_training(learner.begin_offline(X_buf, y_buf))
    steps = 0
    for _ in range(strategy.epochs):
        perm = rng.permutation(len(y_buf))
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            meter.add_training(learner.train_step(X_buf[idx], y_buf[idx]))
            steps += 1
    return steps


def expected_steps(n: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(n / batch_size)


def supervised_pretrain(fmap: FeatureMap, X, y, classes, rng, train_map: bool,
                        epochs=10, lr=0.05, batch_size=64, momentum=0.9) -> LinearHead:
    """Cross-entropy pretraining of a linear head (and the map, when
    ``train_map``) over ``classes``."""
    head = LinearHead(fmap.output_dim)
    for c in classes:
        head.admit(c)
    net = Network(fmap, head, train_map=train_map)
    state = SgdState(lr, momentum)
    X = np.asarray(X)
    y = np.asarray(y)
    for _ in range(epochs):
        perm = rng.permutation(len(y))
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            _, grads = xent_loss_and_grad(net, X[idx], y[idx])
            sgd_step(net.params(), grads, state)
    return head


__all__ = [
    "EwcState", "Network", "SgdState", "TrainingError", "UpdateStrategy", "batch_sizes",
    "distillation_term", "ewc_penalty", "expected_steps", "fisher_estimate", "lwf_loss",
    "lwf_loss_and_grad", "meter_training", "pretrain_prototypical", "proto_episode_loss",
    "run_offline_phase", "sample_episode", "scaled_switch_point", "sgd_step",
    "supervised_pretrain", "xent_from_logits", "xent_loss_and_grad",
]
