"""Experiment configuration loaded from YAML.

Every key is optional; omitted keys take the defaults below.  Example::

    seed: 0
    out: runs/desk
    data: {synthetic: true}
    attacks: {train: [pwws, textfooler, iga], held_out: ga}
    detector: {k_per_class: 200}
    corrector: {beta: 0.4}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import List, Optional

import yaml

from .attacks import KINDS
from .corrector import STRATEGIES


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class DataSection:
    dir: Optional[str] = None  # defaults to <run dir>/data
    synthetic: bool = True
    num_classes: int = 2
    train: Optional[str] = None
    test: Optional[str] = None
    lexicon: Optional[str] = None
    vectors: Optional[str] = None
    n_train: int = 3000
    n_test: int = 1000
    min_count: int = 1

    def path(self, name: str, base: Path) -> Path:
        """Explicit path for ``name`` or its default file name under ``dir`` (else ``base``)."""
        explicit = getattr(self, name)
        if explicit:
            return Path(explicit)
        default = {"train": "train.tsv", "test": "test.tsv", "lexicon": "lexicon.tsv", "vectors": "vectors.txt"}
        return Path(self.dir or base) / default[name]


@dataclass
class VictimSection:
    arch: str = "textcnn"
    epochs: int = 4
    lr: float = 1e-3
    batch_size: int = 32
    emb_dim: int = 32
    n_filters: int = 100
    hidden: int = 128
    dropout: float = 0.5


@dataclass
class AttackSection:
    train: List[str] = field(default_factory=lambda: ["pwws", "textfooler", "iga"])
    held_out: str = "ga"
    max_fraction: float = 0.25
    pop_size: int = 20
    generations: int = 20
    cos_threshold: float = 0.5


@dataclass
class DetectorSection:
    k_per_class: int = 200
    combiner_input: str = "logits"
    view: str = "matrix"
    hidden: int = 128
    max_epochs: int = 30
    patience: int = 5
    lr: float = 5e-4
    batch_size: int = 32
    transform: str = "log"
    ig_steps: int = 32
    awi_target: str = "prob"


@dataclass
class CorrectorSection:
    beta: float = 0.4
    strategy: str = "saliency"
    freq_low_percentile: float = 0.25


@dataclass
class EvalSection:
    n_sentences: int = 200
    attacks: List[str] = field(default_factory=lambda: list(KINDS))
    beta_grid: List[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    k_grid: List[int] = field(default_factory=lambda: [50, 100, 200])
    ablation_seeds: int = 3
    fgws_percentiles: List[float] = field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/desk"
    data: DataSection = field(default_factory=DataSection)
    victim: VictimSection = field(default_factory=VictimSection)
    attacks: AttackSection = field(default_factory=AttackSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    corrector: CorrectorSection = field(default_factory=CorrectorSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        a = self.attacks
        for kind in list(a.train) + [a.held_out] + list(self.eval.attacks):
            if kind not in KINDS:
                raise ConfigError(f"unknown attack {kind!r}; choose from {', '.join(KINDS)}")
        if a.held_out in a.train:
            raise ConfigError(f"held-out attack {a.held_out!r} also listed as a training attack")
        if not a.train:
            raise ConfigError("attacks.train must list at least one attack")
        if self.victim.arch not in ("textcnn", "lstm"):
            raise ConfigError(f"unknown victim architecture {self.victim.arch!r}")
        if self.detector.combiner_input not in ("logits", "hidden"):
            raise ConfigError("detector.combiner_input must be 'logits' or 'hidden'")
        if self.detector.view not in ("matrix", "column"):
            raise ConfigError("detector.view must be 'matrix' or 'column'")
        if self.detector.awi_target not in ("logit", "prob"):
            raise ConfigError("detector.awi_target must be 'logit' or 'prob'")
        if self.detector.transform not in ("linear", "log"):
            raise ConfigError("detector.transform must be 'linear' or 'log'")
        if self.detector.ig_steps < 1:
            raise ConfigError("detector.ig_steps must be positive")
        if self.detector.k_per_class < 1:
            raise ConfigError("detector.k_per_class must be positive")
        if not 0 <= self.corrector.beta <= 1:
            raise ConfigError("corrector.beta must lie in [0, 1]")
        if self.corrector.strategy not in STRATEGIES:
            raise ConfigError(f"unknown corrector strategy {self.corrector.strategy!r}")
        if any(not 0 <= b <= 1 for b in self.eval.beta_grid):
            raise ConfigError("eval.beta_grid values must lie in [0, 1]")
        if not self.eval.fgws_percentiles or any(not 0 < q < 1 for q in self.eval.fgws_percentiles):
            raise ConfigError("eval.fgws_percentiles must be a non-empty list of values in (0, 1)")
        if self.eval.n_sentences < 1:
            raise ConfigError("eval.n_sentences must be positive")
        if self.data.num_classes < 2:
            raise ConfigError("data.num_classes must be at least 2")
        train, test = self.data.path("train", self.run_dir / "data"), self.data.path("test", self.run_dir / "data")
        if train.resolve() == test.resolve():
            raise ConfigError("train and test data must be different files")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that influences results (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / f"seed-{self.seed}"


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    try:
        cfg = _build(ExperimentConfig, raw, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return cfg.validate()
