"""Experiment configuration: JSON file -> validated, fully-resolved dataclasses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .core import ConfigError

_SEED = {"type": "integer", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _SEED,
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "languages": {"type": "array", "items": {"type": "string"}, "minItems": 2},
                "docs_per_split": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"pretrain": _POS_INT, "train": _POS_INT, "test": _POS_INT},
                },
                "topic_count": _POS_INT,
                "zipf_s": _POS_NUM,
                "shared_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "train_queries_per_doc": _POS_NUM,
                "seed": _SEED,
            },
        },
        "backbone": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": _POS_INT,
                "hidden": _POS_INT,
                "heads": _POS_INT,
                "ffn_dim": _POS_INT,
                "vocab_size": _POS_INT,
                "max_positions": {"type": "integer", "minimum": 180},
                "steps": {"type": "integer", "minimum": 0},
                "batch": _POS_INT,
                "lr": _POS_NUM,
                "seq_len": {"type": "integer", "minimum": 8},
                "seed": _SEED,
            },
        },
        "adapters": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch": _POS_INT,
                "lr": _POS_NUM,
                "reduction_factor": _POS_INT,
                "seed": _SEED,
            },
        },
        "retrieval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variants": {"type": "array", "items": {"enum": ["dpr", "colbert"]}, "minItems": 1},
                "modes": {"type": "array", "items": {"enum": ["adapter", "adapter-no-lang", "fmft"]}},
                "reduction_factor": _POS_INT,
                "lr": _POS_NUM,
                "steps": {"type": "integer", "minimum": 0},
                "batch": _POS_INT,
                "triples_per_query": _POS_INT,
                "seed": _SEED,
            },
        },
        "conditions": {"type": "array", "items": {"enum": ["E-E", "E-D", "D-D"]}},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": _POS_INT,
                "cutoffs": {"type": "array", "items": _POS_INT, "minItems": 1},
                "correction": {"enum": ["bonferroni"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": _SEED,
            },
        },
    },
}


@dataclass
class CorpusSection:
    languages: list[str] = field(default_factory=lambda: ["eng", "lng1"])
    docs_per_split: dict[str, int] = field(default_factory=lambda: {"pretrain": 400, "train": 300, "test": 200})
    topic_count: int = 8
    zipf_s: float = 1.1
    shared_fraction: float = 0.25
    train_queries_per_doc: float = 1.0
    seed: int | None = None


@dataclass
class BackboneSection:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 512
    max_positions: int = 192
    steps: int = 400
    batch: int = 16
    lr: float = 1e-3
    seq_len: int = 64
    seed: int | None = None


@dataclass
class AdaptersSection:
    steps: int = 200
    batch: int = 16
    lr: float = 1e-3
    reduction_factor: int = 2
    seed: int | None = None


@dataclass
class RetrievalSection:
    variants: list[str] = field(default_factory=lambda: ["dpr", "colbert"])
    modes: list[str] = field(default_factory=lambda: ["adapter", "fmft", "adapter-no-lang"])
    reduction_factor: int = 16
    lr: float = 1e-3
    steps: int = 150
    batch: int = 8
    triples_per_query: int = 2
    seed: int | None = None


@dataclass
class EvalSection:
    k: int = 100
    cutoffs: list[int] = field(default_factory=lambda: [100, 10])
    correction: str = "bonferroni"
    alpha: float = 0.05
    seed: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    adapters: AdaptersSection = field(default_factory=AdaptersSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    conditions: list[str] = field(default_factory=lambda: ["E-E", "E-D", "D-D"])
    eval: EvalSection = field(default_factory=EvalSection)

    def resolve_seeds(self) -> "ExperimentConfig":
        """Fill every unset phase seed from the top-level seed."""
        for offset, section in enumerate((self.corpus, self.backbone, self.adapters, self.retrieval, self.eval)):
            if section.seed is None:
                section.seed = self.seed * 1000 + offset
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "corpus": CorpusSection,
    "backbone": BackboneSection,
    "adapters": AdaptersSection,
    "retrieval": RetrievalSection,
    "eval": EvalSection,
}


def from_dict(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "(top level)"
        raise ConfigError(f"config key {where}: {e.message}") from None
    kwargs = {name: cls(**raw.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(seed=raw.get("seed", 0), conditions=raw.get("conditions", ["E-E", "E-D", "D-D"]), **kwargs)
    if seed_override is not None:
        cfg.seed = seed_override
        for section in _SECTIONS:
            getattr(cfg, section).seed = None
    if "eng" not in cfg.corpus.languages:
        raise ConfigError('config key corpus.languages: must include "eng"')
    return cfg.resolve_seeds()


def load_config(path: str | Path | None, seed_override: int | None = None) -> ExperimentConfig:
    if path is None:
        return from_dict({}, seed_override)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: invalid JSON ({e})") from None
    return from_dict(raw, seed_override)
