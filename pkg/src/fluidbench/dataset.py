"""Labeled feature-vector datasets: binary embedding files and Gaussian mixtures."""
from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

MAGIC = b"FLDE"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class DatasetError(ValueError):
    """Raised for malformed embedding files, manifests or dataset contents."""


class Role(str, enum.Enum):
    PRETRAIN = "pretrain"
    NOVEL = "novel"


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of feature vectors with per-class roles.

    ``pretrain_pool`` holds indices reserved for the pretraining phase;
    every other index is available to the stream.
    """

    features: np.ndarray
    labels: np.ndarray
    class_roles: dict[int, Role]
    pretrain_pool: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        pool = np.array(self.pretrain_pool, dtype=np.int64)
        if feats.ndim != 2:
            raise DatasetError("features must be a 2-D array")
        if labels.shape != (feats.shape[0],):
            raise DatasetError("one label per feature row is required")
        if not np.all(np.isfinite(feats)):
            raise DatasetError("features contain NaN or Inf")
        roles = {int(c): Role(r) for c, r in self.class_roles.items()}
        if sorted(roles) != list(range(len(roles))):
            raise DatasetError("class ids must form a contiguous range starting at 0")
        unknown = set(np.unique(labels).tolist()) - set(roles)
        if unknown:
            raise DatasetError(f"samples reference classes without a role: {sorted(unknown)}")
        if pool.size and (pool.min() < 0 or pool.max() >= len(labels)):
            raise DatasetError("pretrain pool index out of range")
        if any(roles[int(c)] is not Role.PRETRAIN for c in labels[pool]):
            raise DatasetError("pretrain pool may only contain pretrain-class samples")
        for arr in (feats, labels, pool):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_roles", roles)
        object.__setattr__(self, "pretrain_pool", pool)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.features[i], int(self.labels[i]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_roles)

    @property
    def stream_pool(self) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        mask[self.pretrain_pool] = False
        return np.flatnonzero(mask)

    def pretrain_classes(self) -> list[int]:
        return [c for c, r in sorted(self.class_roles.items()) if r is Role.PRETRAIN]

    def fingerprint(self) -> str:
        """Content hash used to detect runs over different datasets."""
        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        h.update(json.dumps({str(c): r.value for c, r in self.class_roles.items()}).encode())
        h.update(self.pretrain_pool.tobytes())
        return h.hexdigest()[:16]


def split_pretrain_pool(labels: np.ndarray, roles: dict[int, Role]) -> np.ndarray:
    """First half (rounded up) of each pretrain class, in storage order."""
    pool = []
    for c, role in sorted(roles.items()):
        if role is not Role.PRETRAIN:
            continue
        idx = np.flatnonzero(labels == c)
        pool.extend(idx[: math.ceil(len(idx) / 2)].tolist())
    return np.array(sorted(pool), dtype=np.int64)


def read_manifest(path) -> dict[int, Role]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    try:
        roles = {int(entry["id"]): Role(entry["role"]) for entry in doc["classes"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    return roles


def write_manifest(roles: dict[int, Role], path) -> None:
    doc = {"classes": [{"id": c, "role": Role(r).value} for c, r in sorted(roles.items())]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _read_records(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read embedding file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetError("embedding file shorter than its header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"unsupported version {version}")
    body = len(raw) - _HEADER.size
    record = 4 + 4 * d
    if n == 0 and body == 0:
        return np.zeros((0, d)), np.zeros(0, dtype=np.int64)
    if d == 0 or body % n != 0 or body // n != record:
        per = body / n if n else float("nan")
        raise DatasetError(
            f"dimension mismatch: header declares d={d} ({record} bytes per record) "
            f"but the file holds {per:g} bytes per record"
        )
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (d,))])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    return arr["x"].astype(np.float64), arr["label"].astype(np.int64)


def load_embeddings(path, manifest) -> Dataset:
    """Read an embedding file plus its class-role manifest."""
    features, labels = _read_records(path)
    roles = read_manifest(manifest)
    missing = set(np.unique(labels).tolist()) - set(roles)
    if missing:
        raise DatasetError(f"unknown class ids in records: {sorted(missing)}")
    return Dataset(features, labels, roles, split_pretrain_pool(labels, roles))


def write_embeddings(dataset: Dataset, path) -> None:
    n, d = dataset.features.shape
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (d,))])
    arr = np.empty(n, dtype=rec)
    arr["label"] = dataset.labels
    arr["x"] = dataset.features.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d))
        fh.write(arr.tobytes())


@dataclass(frozen=True)
class GaussianMixtureSpec:
    num_classes: int
    dim: int
    cluster_separation: float
    samples_per_class: int
    pretrain_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("num_classes must be at least 2")
        if self.dim < 1:
            raise DatasetError("dim must be at least 1")
        if self.samples_per_class < 1:
            raise DatasetError("samples_per_class must be at least 1")
        if self.cluster_separation < 0:
            raise DatasetError("cluster_separation must be non-negative")
        if not 0 < self.pretrain_fraction <= 1:
            raise DatasetError("pretrain_fraction must lie in (0, 1]")


# above this many classes the pairwise repulsion is too costly; directions
# stay random and only the final rescaling applies
SPREAD_MAX_CLASSES = 256


def _spread_directions(num_classes: int, dim: int, rng, iters: int = 2000) -> np.ndarray:
    """Unit vectors pushed apart by a steep inverse-power repulsion."""
    u = rng.standard_normal((num_classes, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    if num_classes > SPREAD_MAX_CLASSES:
        return u
    for _ in range(iters):
        diff = u[:, None] - u[None]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-9:
            break
        w = (dist / dist.min()) ** -14.0
        u = u + 0.05 * (w[..., None] * diff).sum(axis=1) / w.sum(axis=1, keepdims=True)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u


def place_means(num_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    """Class means at pairwise distance ``separation``.

    Regular-simplex vertices when they fit in ``dim`` dimensions (exact
    pairwise distances).  Otherwise equal distances are impossible; the
    means are spread over a sphere (a line when ``dim`` is 1) and scaled so
    the closest pair sits exactly ``separation`` apart (no pair is closer).
    """
    if num_classes <= dim + 1:
        # centred standard basis of R^K has pairwise distance sqrt(2); express
        # it in K-1 coordinates, then embed those isometrically into R^dim
        radius = separation / math.sqrt(2.0)
        verts = np.eye(num_classes) - 1.0 / num_classes
        _, _, vt = np.linalg.svd(verts)
        coords = verts @ vt[: num_classes - 1].T
        basis, _ = np.linalg.qr(rng.standard_normal((dim, num_classes - 1)))
        return radius * coords @ basis.T
    if separation == 0:
        return np.zeros((num_classes, dim))
    if dim == 1:
        # evenly spaced on the line: neighbours exactly ``separation`` apart
        return separation * (np.arange(num_classes) - (num_classes - 1) / 2.0)[:, None]
    u = _spread_directions(num_classes, dim, rng)
    gaps = np.linalg.norm(u[:, None] - u[None], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    if gaps.min() < 1e-6:
        raise DatasetError(
            f"cannot place {num_classes} means in {dim} dimensions at separation {separation}"
        )
    return u * (separation / gaps.min())


def synth_means(spec: GaussianMixtureSpec) -> np.ndarray:
    """The class means ``synth_gaussian`` places for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    return place_means(spec.num_classes, spec.dim, spec.cluster_separation, rng)


def synth_gaussian(spec: GaussianMixtureSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    means = place_means(spec.num_classes, spec.dim, spec.cluster_separation, rng)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    features = means[labels] + rng.standard_normal((len(labels), spec.dim))
    n_pretrain = math.ceil(spec.pretrain_fraction * spec.num_classes)
    roles = {c: (Role.PRETRAIN if c < n_pretrain else Role.NOVEL) for c in range(spec.num_classes)}
    return Dataset(features, labels, roles, split_pretrain_pool(labels, roles))


def class_means(dataset: Dataset) -> np.ndarray:
    """Empirical per-class means (rows for classes without samples are NaN)."""
    out = np.full((dataset.num_classes, dataset.dim), np.nan)
    for c in range(dataset.num_classes):
        mask = dataset.labels == c
        if mask.any():
            out[c] = dataset.features[mask].mean(axis=0)
    return out
