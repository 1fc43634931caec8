"""Classifier heads and feature maps.

Every head keeps an ordered list of the classes it knows; row ``i`` of
its parameters belongs to ``classes[i]``.  Batch methods take features
of shape ``(n, d)`` and return logits of shape ``(n, k)``.  Gradients of
the batch methods are analytic and exercised against finite differences
in the test-suite.
"""
from __future__ import annotations

import enum

import numpy as np

from . import kernels


class HeadError(ValueError):
    pass


class Similarity(str, enum.Enum):
    DOT = "dot"
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _unit_rows(a):
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise HeadError("zero-norm vector cannot be normalized")
    return a / norms, norms


def _unit_features(F):
    """Batched feature normalisation for training.  An all-zero row (a dead
    ReLU output) has no direction: it maps to zero, so it scores 0 against
    every class and passes no gradient back."""
    norms = np.linalg.norm(F, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return F / safe, safe, (norms > 0)


# ---------------------------------------------------------------------------
# feature maps


class FeatureMap:
    """Identity map (``layers`` empty) or a ReLU MLP.

    Every affine layer, including the last, is followed by ``max(0, .)``.
    Weights are stored as ``(out, in)`` matrices.
    """

    def __init__(self, input_dim: int, layers=None):
        self.input_dim = int(input_dim)
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for W, b in (layers or [])]
        prev = self.input_dim
        for W, b in self.layers:
            if W.shape[1] != prev or b.shape != (W.shape[0],):
                raise HeadError("MLP layer shapes do not chain")
            prev = W.shape[0]

    @classmethod
    def frozen(cls, dim: int) -> "FeatureMap":
        return cls(dim)

    @classmethod
    def mlp(cls, sizes, rng) -> "FeatureMap":
        """He-initialised MLP with layer widths ``sizes`` (input first)."""
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            W = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
            layers.append((W, np.zeros(n_out)))
        return cls(sizes[0], layers)

    @property
    def kind(self) -> str:
        return "mlp" if self.layers else "frozen"

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0] if self.layers else self.input_dim

    def macs(self) -> int:
        return sum(W.shape[0] * W.shape[1] for W, _ in self.layers)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise HeadError(f"dimension mismatch: map expects {self.input_dim}, got {X.shape[-1]}")
        return X

    def __call__(self, X):
        return self.forward(X)[0]

    def forward(self, X):
        """Return ``(features, cache)``; cache holds every layer input."""
        X = self._check(X)
        acts = [X]
        h = X
        for W, b in self.layers:
            h = np.maximum(h @ W.T + b, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, dF, acts):
        """Gradients of the layer parameters given ``dL/dfeatures``."""
        grads = {}
        delta = np.asarray(dF, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            delta = delta * (acts[i + 1] > 0)
            grads[f"W{i}"] = delta.T @ acts[i]
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ W
        return grads

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim,
                "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers]}

    @classmethod
    def from_dict(cls, doc) -> "FeatureMap":
        return cls(doc["input_dim"], [(np.array(l["W"]), np.array(l["b"])) for l in doc["layers"]])

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.input_dim, [(W.copy(), b.copy()) for W, b in self.layers])


def mlp_forward(fmap: FeatureMap, x):
    return fmap(x)


# ---------------------------------------------------------------------------
# centroids


class CentroidStore:
    """Running per-class feature sums and counts."""

    def __init__(self, dim: int, normalize_inputs: bool = False):
        self.dim = int(dim)
        self.normalize_inputs = normalize_inputs
        self.classes: list[int] = []
        self.row_of: dict[int, int] = {}
        self.sums = np.zeros((0, self.dim))
        self.counts = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.classes)

    def admit(self, class_id: int) -> int:
        if class_id in self.row_of:
            raise HeadError(f"class {class_id} already admitted")
        self.row_of[class_id] = len(self.classes)
        self.classes.append(class_id)
        self.sums = np.vstack([self.sums, np.zeros((1, self.dim))])
        self.counts = np.append(self.counts, 0)
        return self.row_of[class_id]

    def add(self, class_id: int, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
            raise HeadError("centroid update needs a finite vector of the store's dimension")
        scale = 1.0
        if self.normalize_inputs:
            norm = float(np.linalg.norm(x))
            if norm == 0:
                raise HeadError("zero-norm input cannot be normalized")
            scale = 1.0 / norm
        if class_id not in self.row_of:
            self.admit(class_id)
        kernels.add_row(self.sums, self.counts, self.row_of[class_id], x, scale)

    def add_batch(self, X, labels) -> None:
        for x, c in zip(np.asarray(X), labels):
            self.add(int(c), x)

    @property
    def active(self) -> np.ndarray:
        return self.counts > 0

    def centroids(self) -> np.ndarray:
        """Class means; rows with no samples are zero."""
        denom = np.maximum(self.counts, 1)[:, None]
        return self.sums / denom

    def to_dict(self) -> dict:
        return {"dim": self.dim, "normalize_inputs": self.normalize_inputs,
                "classes": list(self.classes), "sums": self.sums.tolist(),
                "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "CentroidStore":
        store = cls(doc["dim"], doc["normalize_inputs"])
        store.classes = [int(c) for c in doc["classes"]]
        store.row_of = {c: i for i, c in enumerate(store.classes)}
        store.sums = np.array(doc["sums"], dtype=np.float64).reshape(-1, store.dim)
        store.counts = np.array(doc["counts"], dtype=np.int64)
        return store


def update_centroid(store: CentroidStore, class_id: int, x) -> CentroidStore:
    store.add(class_id, x)
    return store


def _metric_logits(reps, x, metric: Similarity):
    """Negative distance (or similarity) of ``x`` to each row of ``reps``."""
    metric = Similarity(metric)
    if metric is Similarity.EUCLIDEAN:
        return -np.sqrt(np.maximum(kernels.sq_dists(reps, x), 0.0))
    dots = kernels.dot_rows(reps, x)
    if metric is Similarity.DOT:
        return dots
    norms = np.linalg.norm(reps, axis=1) * np.linalg.norm(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)


def ncm_logits(store: CentroidStore, x, metric=Similarity.EUCLIDEAN):
    if not store.active.any():
        raise HeadError("no class has any samples")
    logits = np.full(len(store), -np.inf)
    act = store.active
    logits[act] = _metric_logits(store.centroids()[act], x, metric)
    return logits


def ncm_predict(store: CentroidStore, x, metric=Similarity.EUCLIDEAN):
    """Softmax of negative distances to the class means."""
    return softmax(ncm_logits(store, x, metric))


# ---------------------------------------------------------------------------
# heads


class _Head:
    kind = ""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.classes: list[int] = []
        self.row_of: dict[int, int] = {}

    def __len__(self):
        return len(self.classes)

    def _register(self, class_id: int):
        if class_id in self.row_of:
            raise HeadError(f"class {class_id} already admitted")
        self.row_of[class_id] = len(self.classes)
        self.classes.append(int(class_id))

    def rows(self, labels) -> np.ndarray:
        try:
            return np.array([self.row_of[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise HeadError(f"label {exc.args[0]} is not a known class") from None

    def score(self, f):
        """Logits for a single feature vector."""
        return self.logits(np.asarray(f, dtype=np.float64)[None])[0]


class LinearHead(_Head):
    kind = "linear"

    def __init__(self, dim: int):
        super().__init__(dim)
        self.W = np.zeros((0, self.dim))
        self.b = np.zeros(0)

    def admit(self, class_id: int, x=None):
        self._register(class_id)
        self.W = np.vstack([self.W, np.zeros((1, self.dim))])
        self.b = np.append(self.b, 0.0)

    def params(self):
        return {"W": self.W, "b": self.b}

    def score(self, f):
        return kernels.dot_rows(self.W, f) + self.b

    def logits(self, F):
        return F @ self.W.T + self.b

    def backward(self, dZ, F):
        return {"W": dZ.T @ F, "b": dZ.sum(axis=0)}, dZ @ self.W

    def representations(self):
        return self.W

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "classes": self.classes,
                "W": self.W.tolist(), "b": self.b.tolist()}


class CosineHead(_Head):
    """``logit_i = s * cos(W_i, f)`` with a learnable temperature ``s``."""

    kind = "cosine"

    def __init__(self, dim: int, temperature: float = 4.0):
        super().__init__(dim)
        if temperature <= 0:
            raise HeadError("temperature must be positive")
        self.W = np.zeros((0, self.dim))
        self.s = np.array([float(temperature)])

    @property
    def temperature(self) -> float:
        return float(self.s[0])

    def admit(self, class_id: int, x=None):
        """New rows are imprinted with the first sample when one is given."""
        self._register(class_id)
        row = np.zeros((1, self.dim)) if x is None else np.asarray(x, dtype=np.float64)[None]
        self.W = np.vstack([self.W, row])

    def params(self):
        return {"W": self.W, "s": self.s}

    def score(self, f):
        f = np.asarray(f, dtype=np.float64)
        nf = np.linalg.norm(f)
        if nf == 0:
            raise HeadError("zero-norm input")
        norms = np.linalg.norm(self.W, axis=1)
        dots = kernels.dot_rows(self.W, f)
        return self.s[0] * dots / (np.where(norms > 0, norms, 1.0) * nf)

    def logits(self, F):
        U, _, _ = _unit_features(F)
        Wn = self._unit_weights()
        return self.s[0] * (U @ Wn.T)

    def _unit_weights(self):
        norms = np.linalg.norm(self.W, axis=1, keepdims=True)
        return self.W / np.where(norms > 0, norms, 1.0)

    def backward(self, dZ, F):
        U, fnorm, live = _unit_features(F)
        wnorm = np.linalg.norm(self.W, axis=1, keepdims=True)
        Wn = self.W / np.where(wnorm > 0, wnorm, 1.0)
        C = U @ Wn.T
        ds = np.array([np.sum(dZ * C)])
        G = self.s[0] * dZ
        dW = (G.T @ U - (G * C).sum(axis=0)[:, None] * Wn) / np.where(wnorm > 0, wnorm, 1.0)
        dF = (G @ Wn - (G * C).sum(axis=1, keepdims=True) * U) / fnorm * live
        return {"W": dW, "s": ds}, dF

    def representations(self):
        return self.W

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "classes": self.classes,
                "W": self.W.tolist(), "temperature": self.temperature}


def cosine_score(head: CosineHead, x):
    return head.score(x)


def imprint_weights(head: CosineHead, store: CentroidStore) -> CosineHead:
    """Set every weight row to its class centroid."""
    cents = store.centroids()
    for c, i in head.row_of.items():
        j = store.row_of.get(c)
        if j is None or store.counts[j] == 0:
            raise HeadError(f"class {c} has no samples to imprint")
        head.W[i] = cents[j]
    return head


class ExemplarTuningHead(_Head):
    """Class vector = mean of L2-normalised features + learnable residual.

    Slots whose centroid has no samples yet score ``-inf``.
    """

    kind = "exemplar"

    def __init__(self, dim: int, similarity=Similarity.DOT):
        super().__init__(dim)
        self.similarity = Similarity(similarity)
        self.store = CentroidStore(dim, normalize_inputs=True)
        self.R = np.zeros((0, self.dim))

    def admit(self, class_id: int, x=None):
        self._register(class_id)
        self.store.admit(class_id)
        self.R = np.vstack([self.R, np.zeros((1, self.dim))])

    def observe(self, class_id: int, f):
        self.store.add(class_id, f)

    def params(self):
        return {"R": self.R}

    def class_vectors(self):
        return self.store.centroids() + self.R

    def representations(self):
        return self.class_vectors()

    def score(self, f):
        act = self.store.active
        if not act.any():
            raise HeadError("no known class has any samples")
        out = np.full(len(self), -np.inf)
        out[act] = _metric_logits(self.class_vectors()[act], f, self.similarity)
        return out

    def logits(self, F):
        C = self.class_vectors()
        act = self.store.active
        out = np.full((F.shape[0], len(self)), -np.inf)
        Ca = C[act]
        if self.similarity is Similarity.DOT:
            out[:, act] = F @ Ca.T
        elif self.similarity is Similarity.COSINE:
            U, _, _ = _unit_features(F)
            Cn, _ = _unit_rows(Ca)
            out[:, act] = U @ Cn.T
        else:
            diff = Ca[None, :, :] - F[:, None, :]
            out[:, act] = -np.sqrt((diff ** 2).sum(axis=-1))
        return out

    def backward(self, dZ, F):
        act = self.store.active
        C = self.class_vectors()[act]
        G = dZ[:, act]
        dR = np.zeros_like(self.R)
        if self.similarity is Similarity.DOT:
            dR[act] = G.T @ F
            dF = G @ C
        elif self.similarity is Similarity.COSINE:
            U, fnorm, live = _unit_features(F)
            Cn, cnorm = _unit_rows(C)
            S = U @ Cn.T
            dR[act] = (G.T @ U - (G * S).sum(axis=0)[:, None] * Cn) / cnorm
            dF = (G @ Cn - (G * S).sum(axis=1, keepdims=True) * U) / fnorm * live
        else:
            diff = C[None, :, :] - F[:, None, :]
            dist = np.sqrt((diff ** 2).sum(axis=-1))
            unit = diff / np.where(dist > 0, dist, 1.0)[..., None]
            dR[act] = -(G[..., None] * unit).sum(axis=0)
            dF = (G[..., None] * unit).sum(axis=1)
        return {"R": dR}, dF

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "classes": self.classes,
                "similarity": self.similarity.value, "R": self.R.tolist(),
                "store": self.store.to_dict()}


def et_score(head: ExemplarTuningHead, x):
    return head.score(x)


class NcmHead(_Head):
    """Nearest class mean: softmax over negative distances to centroids."""

    kind = "ncm"

    def __init__(self, dim: int, metric=Similarity.EUCLIDEAN, normalize_inputs: bool = False):
        super().__init__(dim)
        self.metric = Similarity(metric)
        self.store = CentroidStore(dim, normalize_inputs=normalize_inputs)

    def admit(self, class_id: int, x=None):
        self._register(class_id)
        self.store.admit(class_id)

    def observe(self, class_id: int, f):
        self.store.add(class_id, f)

    def params(self):
        return {}

    def score(self, f):
        return ncm_logits(self.store, f, self.metric)

    def logits(self, F):
        return np.stack([self.score(f) for f in F])

    def representations(self):
        return self.store.centroids()

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "classes": self.classes,
                "metric": self.metric.value, "store": self.store.to_dict()}


def admit_class(head, class_id: int, x=None):
    head.admit(class_id, x)
    return head


def head_from_dict(doc):
    kind = doc["kind"]
    if kind == "linear":
        head = LinearHead(doc["dim"])
        head.W = np.array(doc["W"], dtype=np.float64).reshape(-1, head.dim)
        head.b = np.array(doc["b"], dtype=np.float64)
    elif kind == "cosine":
        head = CosineHead(doc["dim"], doc["temperature"])
        head.W = np.array(doc["W"], dtype=np.float64).reshape(-1, head.dim)
    elif kind == "exemplar":
        head = ExemplarTuningHead(doc["dim"], doc["similarity"])
        head.R = np.array(doc["R"], dtype=np.float64).reshape(-1, head.dim)
        head.store = CentroidStore.from_dict(doc["store"])
    elif kind == "ncm":
        head = NcmHead(doc["dim"], doc["metric"], doc["store"]["normalize_inputs"])
        head.store = CentroidStore.from_dict(doc["store"])
    else:
        raise HeadError(f"unknown head kind {kind!r}")
    head.classes = [int(c) for c in doc["classes"]]
    head.row_of = {c: i for i, c in enumerate(head.classes)}
    return head
