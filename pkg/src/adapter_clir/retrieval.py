"""Bi-encoder retrieval heads (DPR and ColBERT), the triple loss and fine-tuning.

Training modes:

``adapter``
    English language adapters on both sides, frozen with the backbone; only
    task adapters and poolers train.
``adapter-no-lang``
    Same, with empty language slots.
``fmft``
    No adapters; every backbone parameter and the poolers train.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .adapters import TASK_REDUCTION, Adapter, AdapterCatalog, AdapterChain, init_task_adapters
from .core import (
    AdamState,
    ConfigError,
    DimensionError,
    ParamRegistry,
    ParamTensor,
    Tensor,
    adam_step,
    affine,
    backward,
    l2_normalize,
    load_checkpoint,
    maxsim,
    mean,
    mul,
    save_checkpoint,
    softplus,
    sub,
    take,
    total,
)
from .encoder import SIDES, Backbone, EncoderConfig, EncoderModel, trim_padding
from .pretrain import PAD

log = logging.getLogger(__name__)

Variant = Literal["dpr", "colbert"]
Mode = Literal["adapter", "adapter-no-lang", "fmft", "untrained"]
MODES = ("adapter", "adapter-no-lang", "fmft", "untrained")
COLBERT_DIM = 128
QUERY_LEN = 32
DOC_LEN = 180


@dataclass
class Pooler:
    weight: ParamTensor
    bias: ParamTensor

    def params(self) -> list[ParamTensor]:
        return [self.weight, self.bias]


def init_pooler(variant: Variant, h: int, name: str, seed: int) -> Pooler:
    out = h if variant == "dpr" else COLBERT_DIM
    reg = ParamRegistry(seed)
    return Pooler(reg.create(f"pooler.{name}.weight", (h, out)), reg.create(f"pooler.{name}.bias", (out,), init="zeros"))


@dataclass
class BiEncoderModel(EncoderModel):
    variant: Variant = "dpr"
    poolers: dict[str, Pooler] = field(default_factory=dict)
    mode: Mode = "adapter"

    def extra_params(self) -> list[ParamTensor]:
        seen, out = set(), []
        for s in SIDES:
            for p in self.poolers[s].params():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def task_params(self) -> list[ParamTensor]:
        seen, out = set(), []
        for s in SIDES:
            ch = self.chain(s)
            if ch.task is None:
                continue
            for a in ch.task:
                for p in a.params():
                    if id(p) not in seen:
                        seen.add(id(p))
                        out.append(p)
        return out

    def represent(self, token_ids: np.ndarray, mask: np.ndarray, side: str) -> Tensor:
        """DPR: [B, h] pooled CLS vectors. ColBERT: [B, n, 128] unit token vectors."""
        hidden = self.hidden_states(token_ids, mask, side)
        pooler = self.poolers[side]
        if self.variant == "dpr":
            return affine(take(hidden, (slice(None), 0)), pooler.weight, pooler.bias)
        return l2_normalize(affine(hidden, pooler.weight, pooler.bias))

    def side_checksum(self, side: str) -> str:
        """Identity of everything that shapes one side's encodings."""
        h = hashlib.sha256(f"{self.variant}|{side}|{self.chain(side).language_tag}".encode())
        for p in self.backbone.params() + self.chain(side).params() + self.poolers[side].params():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(backbone: Backbone, catalog: AdapterCatalog, variant: Variant, mode: Mode = "adapter",
                reduction_factor: int = TASK_REDUCTION, seed: int = 0) -> BiEncoderModel:
    """Assemble a bi-encoder. DPR gets separate query/document task adapters and
    poolers; ColBERT shares one set across both sides."""
    if variant not in ("dpr", "colbert"):
        raise ConfigError(f"unknown variant {variant!r}")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    c = backbone.config
    if mode == "fmft":
        backbone = copy_backbone(backbone)
    if variant == "dpr":
        poolers = {s: init_pooler(variant, c.hidden, s, seed) for s in SIDES}
    else:
        shared = init_pooler(variant, c.hidden, "shared", seed)
        poolers = {s: shared for s in SIDES}
    chains: dict[str, AdapterChain | None] = {s: None for s in SIDES}
    if mode in ("adapter", "adapter-no-lang", "untrained"):
        lang = None
        if mode in ("adapter", "untrained") and "eng" in catalog:
            lang = catalog.get("eng")
        elif mode == "adapter":
            raise ConfigError('adapter mode needs an "eng" language adapter in the catalog')
        if variant == "dpr":
            tasks = {s: tuple(init_task_adapters(s, c.hidden, c.layers, seed, reduction_factor)) for s in SIDES}
        else:
            t = tuple(init_task_adapters("shared", c.hidden, c.layers, seed, reduction_factor))
            tasks = {s: t for s in SIDES}
        chains = {s: AdapterChain(s, lang, tasks[s]) for s in SIDES}
    return BiEncoderModel(backbone, chains, catalog, variant=variant, poolers=poolers, mode=mode)


def copy_backbone(backbone: Backbone) -> Backbone:
    reg = ParamRegistry(backbone.registry.rng_seed)
    for p in backbone.params():
        reg.add(ParamTensor(p.name, p.data.copy(), p.trainable))
    return Backbone(backbone.config, reg)


def configure_trainable(model: BiEncoderModel) -> list[ParamTensor]:
    """Set trainable flags for the model's mode; returns the trainable parameters."""
    for p in model.params():
        p.trainable = False
    if model.mode == "fmft":
        train = model.backbone.params() + model.extra_params()
    else:
        train = model.task_params() + model.extra_params()
    for p in train:
        p.trainable = True
    return train


def trainable_fraction(model: EncoderModel) -> float:
    params = model.params()
    tot = sum(p.data.size for p in params)
    return 100.0 * sum(p.data.size for p in params if p.trainable) / tot


# ---------------------------------------------------------------------------
# scoring


def score_dpr(q_vec, d_vec) -> float:
    q, d = np.asarray(q_vec, dtype=np.float64), np.asarray(d_vec, dtype=np.float64)
    if q.shape != d.shape:
        raise DimensionError(f"query {q.shape} and document {d.shape} vectors differ")
    return float(q @ d)


class EmptyQueryError(ValueError):
    pass


def score_colbert(Q, D, q_mask=None, d_mask=None) -> float:
    """Sum over real query tokens of the best inner product with any real document token."""
    Q, D = np.asarray(Q, dtype=np.float64), np.asarray(D, dtype=np.float64)
    if Q.shape[-1] != D.shape[-1]:
        raise DimensionError(f"token dims differ: {Q.shape} vs {D.shape}")
    if q_mask is not None:
        Q = Q[np.asarray(q_mask, dtype=bool)]
    if d_mask is not None:
        D = D[np.asarray(d_mask, dtype=bool)]
    if len(Q) == 0:
        raise EmptyQueryError("query has no unmasked tokens")
    if len(D) == 0:
        return float("-inf")
    return float((Q @ D.T).max(axis=1).sum())


def triple_loss_value(s_pos: float, s_neg: float) -> float:
    return float(np.logaddexp(0.0, s_neg - s_pos))


def triple_loss(s_pos: Tensor, s_neg: Tensor) -> Tensor:
    """Binary softmax cross-entropy toward the positive: mean of log(1 + exp(s_neg - s_pos))."""
    return mean(softplus(sub(s_neg, s_pos)))


def pair_scores(model: BiEncoderModel, q: Tensor, q_mask: np.ndarray, d: Tensor, d_mask: np.ndarray) -> Tensor:
    """Scores of aligned (query, document) representation rows as a [B] tensor."""
    if model.variant == "dpr":
        return total(mul(q, d), axis=-1)
    return maxsim(q, d, q_mask, d_mask)


# ---------------------------------------------------------------------------
# training


@dataclass
class Triple:
    query: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        if len(self.query) != QUERY_LEN or len(self.positive) != DOC_LEN or len(self.negative) != DOC_LEN:
            raise DimensionError("triples must be padded to 32 query and 180 passage tokens")


@dataclass
class TrainResult:
    model: BiEncoderModel
    losses: list[float]
    nonzero_grad: set[str] = field(default_factory=set)


def _batch(rows: list[np.ndarray]):
    ids = np.stack(rows)
    return trim_padding(ids, ids != PAD)


def train_retrieval(model: BiEncoderModel, triples: list[Triple], steps: int, lr: float = 1e-3, seed: int = 0,
                    batch: int = 8) -> TrainResult:
    if model.mode == "untrained":
        raise ConfigError("untrained models are not fine-tuned")
    if model.mode == "adapter" and model.chain("query").language_tag != "eng":
        raise ConfigError("adapter mode trains with English language adapters on both sides")
    train = configure_trainable(model)
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses: list[float] = []
    seen: set[str] = set()
    for step in range(steps):
        idx = rng.choice(len(triples), size=min(batch, len(triples)), replace=False)
        tb = [triples[i] for i in idx]
        q_ids, q_mask = _batch([t.query for t in tb])
        d_ids, d_mask = _batch([t.positive for t in tb] + [t.negative for t in tb])
        B = len(tb)
        q = model.represent(q_ids, q_mask, "query")
        d = model.represent(d_ids, d_mask, "document")
        s_pos = pair_scores(model, q, q_mask, take(d, slice(0, B)), d_mask[:B])
        s_neg = pair_scores(model, q, q_mask, take(d, slice(B, 2 * B)), d_mask[B:])
        loss = triple_loss(s_pos, s_neg)
        for p in train:
            p.grad = None
        backward(loss)
        for p in train:
            if p.name not in seen and p.grad is not None and np.any(p.grad != 0):
                seen.add(p.name)
        adam_step(train, state, lr)
        losses.append(float(loss.data))
        if step % 50 == 0:
            log.info("%s/%s step %d loss %.4f", model.variant, model.mode, step, losses[-1])
    return TrainResult(model, losses, seen)


# ---------------------------------------------------------------------------
# model checkpoints: params.ckpt (backbone, task adapters, poolers) + model.json


def save_model(model: BiEncoderModel, root, extra: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lang_ids = {id(p) for s in SIDES if model.chain(s).language is not None for p in model.chain(s).language.params()}
    save_checkpoint(root / "params.ckpt", [p for p in model.params() if id(p) not in lang_ids])
    c = model.backbone.config
    meta = {
        "variant": model.variant,
        "mode": model.mode,
        "encoder": dataclasses.asdict(c),
        "backbone_params": [p.name for p in model.backbone.params()],
        "chains": {
            s: {
                "language_tag": model.chain(s).language_tag,
                "task": None if model.chain(s).task is None else [[p.name for p in a.params()] + [a.reduction_factor] for a in model.chain(s).task],
            }
            for s in SIDES
        },
        "poolers": {s: [p.name for p in model.poolers[s].params()] for s in SIDES},
        **(extra or {}),
    }
    (root / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(root, catalog: AdapterCatalog) -> BiEncoderModel:
    root = Path(root)
    meta = json.loads((root / "model.json").read_text())
    params = {p.name: p for p in load_checkpoint(root / "params.ckpt")}
    reg = ParamRegistry(meta["encoder"]["seed"])
    for name in meta["backbone_params"]:
        reg.add(params[name])
    backbone = Backbone(EncoderConfig(**meta["encoder"]), reg)
    chains: dict[str, AdapterChain | None] = {}
    for s in SIDES:
        ch = meta["chains"][s]
        task = None
        if ch["task"] is not None:
            task = tuple(
                Adapter(params[d], params[db], params[u], params[ub], r, "task") for d, db, u, ub, r in ch["task"]
            )
        lang = catalog.get(ch["language_tag"]) if ch["language_tag"] else None
        chains[s] = AdapterChain(s, lang, task) if (lang is not None or task is not None) else None
    poolers = {s: Pooler(params[w], params[b]) for s, (w, b) in meta["poolers"].items()}
    model = BiEncoderModel(backbone, chains, catalog, variant=meta["variant"], poolers=poolers, mode=meta["mode"])
    for p in model.params():
        p.trainable = False
    return model
