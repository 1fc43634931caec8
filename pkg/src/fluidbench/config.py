"""Experiment configuration: a YAML file whose keys mirror ``ExperimentConfig``.

Minimal example::

    data:
      synthetic: {num_classes: 20, dim: 16, cluster_separation: 6.0, samples_per_class: 1200}
    sequence: {num_classes: 20, total_samples: 2000}
    learner: {kind: exemplar}

Everything else has a default.  ``learner``/``strategy``/``ood_scorer`` at the
top level are shorthand for a single entry under ``runs``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .dataset import Dataset, GaussianMixtureSpec, load_embeddings, synth_gaussian
from .learners import LEARNER_KINDS, LearnerSpec
from .ood import SCORERS
from .sequence import SequenceSpec
from .training import UpdateStrategy, scaled_switch_point


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Either a Gaussian mixture spec or an embedding file plus manifest."""

    synthetic: GaussianMixtureSpec | None = None
    embeddings: str | None = None
    manifest: str | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.embeddings is None):
            raise ConfigError("data needs exactly one of 'synthetic' or 'embeddings'")
        if self.embeddings is not None and self.manifest is None:
            raise ConfigError("embedding data needs a 'manifest'")

    def load(self, base: Path | None = None) -> Dataset:
        if self.synthetic is not None:
            return synth_gaussian(self.synthetic)
        base = base or Path(".")
        return load_embeddings(base / self.embeddings, base / self.manifest)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "offline"
    interval: int = 5000
    epochs: int = 4
    switch_at: int | None = None  # None: 10,000, shrunk for short streams

    def build(self, total_samples: int) -> UpdateStrategy:
        switch = self.switch_at
        if switch is None:
            switch = scaled_switch_point(total_samples)
        return UpdateStrategy(self.kind, self.interval, self.epochs, switch)


# learner kind -> update strategy kind when a run does not name one
DEFAULT_STRATEGY = {
    "ncm": "instance",
    "proto": "instance",
    "finetune": "offline",
    "standard": "offline",
    "lwf": "offline",
    "ewc": "offline",
    "imprint": "imprint_then_finetune",
    "exemplar": "hybrid",
}


@dataclass(frozen=True)
class RunConfig:
    name: str
    learner: LearnerSpec
    strategy: StrategyConfig
    ood_scorer: str = "mdt_cosine"

    def __post_init__(self):
        if self.ood_scorer not in SCORERS:
            raise ConfigError(f"unknown ood scorer {self.ood_scorer!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    sequence: SequenceSpec
    runs: tuple[RunConfig, ...]
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    window: int = 1000

    def __post_init__(self):
        if not self.runs:
            raise ConfigError("at least one run is required")
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError("run names must be unique")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.window < 1:
            raise ConfigError("window must be at least 1")

    def sequence_for(self, seed: int) -> SequenceSpec:
        return dataclasses.replace(self.sequence, seed=seed)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(int(s) for s in seeds))

    def with_output_dir(self, path) -> "ExperimentConfig":
        return dataclasses.replace(self, output_dir=str(path))


# ---------------------------------------------------------------------------
# parsing


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, doc, where, drop=()):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    allowed = _fields(cls) - set(drop)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_types(obj, where):
    """Reject values whose type disagrees with the dataclass annotation's
    scalar kind (YAML happily yields strings for typos like ``1e-3x``)."""
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        ann = str(f.type)
        if v is None:
            if "None" not in ann:
                raise ConfigError(f"{where}.{f.name}: must not be null")
            continue
        if ann.startswith("int") and (not isinstance(v, int) or isinstance(v, bool)):
            raise ConfigError(f"{where}.{f.name}: expected an integer")
        if ann.startswith("float") and (not isinstance(v, (int, float)) or isinstance(v, bool)):
            raise ConfigError(f"{where}.{f.name}: expected a number")
        if ann.startswith("str") and not isinstance(v, str):
            raise ConfigError(f"{where}.{f.name}: expected a string")


def _parse_run(doc, where) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    doc = dict(doc)
    learner_doc = doc.pop("learner", None)
    if learner_doc is None:
        raise ConfigError(f"{where}: missing 'learner'")
    learner = _build(LearnerSpec, learner_doc, f"{where}.learner")
    _check_types(learner, f"{where}.learner")
    if not isinstance(learner.backbone, list) or not all(
            isinstance(w, int) and w > 0 for w in learner.backbone):
        raise ConfigError(f"{where}.learner.backbone: expected a list of positive integers")
    strat_doc = doc.pop("strategy", None) or {"kind": DEFAULT_STRATEGY[learner.kind]}
    strategy = _build(StrategyConfig, strat_doc, f"{where}.strategy")
    _check_types(strategy, f"{where}.strategy")
    try:
        strategy.build(10**9)
    except ValueError as exc:
        raise ConfigError(f"{where}.strategy: {exc}") from exc
    name = doc.pop("name", None) or learner.kind
    scorer = doc.pop("ood_scorer", "mdt_cosine")
    if doc:
        raise ConfigError(f"{where}: unknown keys {sorted(doc)}")
    if not isinstance(name, str):
        raise ConfigError(f"{where}.name: expected a string")
    return RunConfig(name, learner, strategy, scorer)


def config_from_dict(doc) -> ExperimentConfig:
    """Validate and build a config from plain data (e.g. parsed YAML)."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    doc = dict(doc)
    data_doc = doc.pop("data", None)
    if not isinstance(data_doc, dict):
        raise ConfigError("missing 'data' section")
    data_doc = dict(data_doc)
    synth = data_doc.pop("synthetic", None)
    if synth is not None:
        synth = _build(GaussianMixtureSpec, synth, "data.synthetic")
        _check_types(synth, "data.synthetic")
    data = _build(DataConfig, {**data_doc, "synthetic": synth}, "data")

    seq_doc = doc.pop("sequence", None)
    if seq_doc is None:
        raise ConfigError("missing 'sequence' section")
    sequence = _build(SequenceSpec, seq_doc, "sequence", drop=("seed",))
    _check_types(sequence, "sequence")

    runs_doc = doc.pop("runs", None)
    single = {k: doc.pop(k) for k in ("learner", "strategy", "ood_scorer", "name") if k in doc}
    if runs_doc is not None and single:
        raise ConfigError("use either 'runs' or a top-level 'learner', not both")
    if runs_doc is None:
        if "learner" not in single:
            raise ConfigError("missing 'runs' (or a top-level 'learner')")
        runs_doc = [single]
    if not isinstance(runs_doc, list):
        raise ConfigError("'runs' must be a list")
    runs = tuple(_parse_run(r, f"runs[{i}]") for i, r in enumerate(runs_doc))
    for r in runs:
        if r.learner.kind not in LEARNER_KINDS:
            raise ConfigError(f"unknown learner kind {r.learner.kind!r}")

    seeds = doc.pop("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool)
                                              for s in seeds):
        raise ConfigError("'seeds' must be a list of integers")
    output_dir = doc.pop("output_dir", "out")
    window = doc.pop("window", 1000)
    if not isinstance(output_dir, str):
        raise ConfigError("'output_dir' must be a string")
    if not isinstance(window, int) or isinstance(window, bool):
        raise ConfigError("'window' must be an integer")
    if doc:
        raise ConfigError(f"unknown top-level keys {sorted(doc)}")
    return ExperimentConfig(data, sequence, runs, tuple(seeds), output_dir, window)


def config_to_dict(config: ExperimentConfig) -> dict:
    data = {}
    if config.data.synthetic is not None:
        data["synthetic"] = dataclasses.asdict(config.data.synthetic)
    else:
        data["embeddings"] = config.data.embeddings
        data["manifest"] = config.data.manifest
    seq = dataclasses.asdict(config.sequence)
    seq.pop("seed")
    return {
        "data": data,
        "sequence": seq,
        "runs": [{"name": r.name, "learner": dataclasses.asdict(r.learner),
                  "strategy": dataclasses.asdict(r.strategy), "ood_scorer": r.ood_scorer}
                 for r in config.runs],
        "seeds": list(config.seeds),
        "output_dir": config.output_dir,
        "window": config.window,
    }


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return config_from_dict(doc)


def serialize_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
