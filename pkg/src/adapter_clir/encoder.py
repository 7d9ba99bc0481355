"""A small post-norm transformer encoder with an adapter slot after each FFN sublayer.

Layer equations (``LN1``/``LN2`` are the layer's two norms)::

    a   = LN1(x + MHA(x))
    f   = FFN(a)                       # dense -> GELU -> dense
    out = LN2(f + a)                   # no adapters at this layer

    h_l = LN2(f + a)                   # with adapters: normalized hidden state
    r_l = f                            # residual handed to every adapter
    out = LN2(chain(h_l, r_l) + a)

A chain of zero-up adapters returns ``r_l`` exactly, so inserting fresh
adapters reproduces the plain layer bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterCatalog, AdapterChain, chain_forward
from .core import (
    ConfigError,
    ParamRegistry,
    ParamTensor,
    Tensor,
    add,
    affine,
    embedding,
    gelu,
    layer_norm,
    self_attention,
)

LN_EPS = 1e-12
SIDES = ("query", "document")


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 512
    max_positions: int = 192
    seed: int = 0
    type_vocab: int = 1
    final_pooler: bool = False

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_positions < 180:
            raise ConfigError("max_positions must cover 180-token passages")


@dataclass
class EncodedText:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    hidden: np.ndarray


class Backbone:
    """Token/position embeddings plus ``layers`` transformer layers, in one registry."""

    def __init__(self, config: EncoderConfig, registry: ParamRegistry | None = None):
        self.config = config
        c = config
        reg = registry if registry is not None else ParamRegistry(c.seed)
        self.registry = reg
        if registry is None:
            h, f = c.hidden, c.ffn_dim
            reg.create("embeddings.token", (c.vocab_size, h))
            reg.create("embeddings.position", (c.max_positions, h))
            reg.create("embeddings.type", (c.type_vocab, h))
            reg.create("embeddings.ln.gamma", (h,), init="ones")
            reg.create("embeddings.ln.beta", (h,), init="zeros")
            for i in range(c.layers):
                p = f"layer.{i}"
                for m in ("q", "k", "v", "o"):
                    reg.create(f"{p}.attn.{m}.weight", (h, h))
                    reg.create(f"{p}.attn.{m}.bias", (h,), init="zeros")
                reg.create(f"{p}.attn.ln.gamma", (h,), init="ones")
                reg.create(f"{p}.attn.ln.beta", (h,), init="zeros")
                reg.create(f"{p}.ffn.in.weight", (h, f))
                reg.create(f"{p}.ffn.in.bias", (f,), init="zeros")
                reg.create(f"{p}.ffn.out.weight", (f, h))
                reg.create(f"{p}.ffn.out.bias", (h,), init="zeros")
                reg.create(f"{p}.ffn.ln.gamma", (h,), init="ones")
                reg.create(f"{p}.ffn.ln.beta", (h,), init="zeros")
            if c.final_pooler:
                # present for parameter accounting only; never used for retrieval
                reg.create("pooler.dense.weight", (h, h))
                reg.create("pooler.dense.bias", (h,), init="zeros")

    def __getitem__(self, name: str) -> ParamTensor:
        return self.registry[name]

    def params(self) -> list[ParamTensor]:
        return list(self.registry)

    def embed(self, token_ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        c = self.config
        n = ids.shape[-1]
        if n > c.max_positions:
            raise VocabError(f"sequence length {n} exceeds max_positions {c.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise VocabError(f"token id outside [0, {c.vocab_size})")
        if positions is None:
            positions = np.arange(n)
        x = add(embedding(self["embeddings.token"], ids), embedding(self["embeddings.position"], positions))
        return add(x, embedding(self["embeddings.type"], np.zeros(1, dtype=np.int64)))

    def layer(self, x: Tensor, i: int, chain: AdapterChain | None, mask: np.ndarray) -> Tensor:
        p = f"layer.{i}"
        W = self.registry
        q = affine(x, W[f"{p}.attn.q.weight"], W[f"{p}.attn.q.bias"])
        k = affine(x, W[f"{p}.attn.k.weight"], W[f"{p}.attn.k.bias"])
        v = affine(x, W[f"{p}.attn.v.weight"], W[f"{p}.attn.v.bias"])
        att = affine(self_attention(q, k, v, self.config.heads, mask), W[f"{p}.attn.o.weight"], W[f"{p}.attn.o.bias"])
        a = layer_norm(add(x, att), W[f"{p}.attn.ln.gamma"], W[f"{p}.attn.ln.beta"], LN_EPS)
        hmid = gelu(affine(a, W[f"{p}.ffn.in.weight"], W[f"{p}.ffn.in.bias"]))
        f = affine(hmid, W[f"{p}.ffn.out.weight"], W[f"{p}.ffn.out.bias"])
        g2, b2 = W[f"{p}.ffn.ln.gamma"], W[f"{p}.ffn.ln.beta"]
        h_l = layer_norm(add(f, a), g2, b2, LN_EPS)
        if chain is None or not chain.has_adapters(i):
            return h_l
        y = chain_forward(chain, i, h_l, f)
        return layer_norm(add(y, a), g2, b2, LN_EPS)

    def forward(self, token_ids: np.ndarray, mask: np.ndarray, chain: AdapterChain | None = None) -> Tensor:
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        x = self.embed(ids)
        x = layer_norm(x, self["embeddings.ln.gamma"], self["embeddings.ln.beta"], LN_EPS)
        for i in range(self.config.layers):
            x = self.layer(x, i, chain, mask)
        return x


def trim_padding(ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing columns that are padding in every row.

    Right-padded inputs only: unmasked outputs are unchanged because masked keys
    get zero attention weight and positions are absolute.
    """
    n = int(mask.sum(axis=1).max()) if mask.size else 0
    return ids[:, : max(n, 1)], mask[:, : max(n, 1)]


@dataclass
class EncoderModel:
    """Shared backbone plus one adapter chain per side."""

    backbone: Backbone
    chains: dict[str, AdapterChain | None] = field(default_factory=lambda: {s: None for s in SIDES})
    catalog: AdapterCatalog = field(default_factory=AdapterCatalog)

    def chain(self, side: str) -> AdapterChain:
        if side not in self.chains:
            raise ConfigError(f"no chain configured for side {side!r}")
        ch = self.chains[side]
        return ch if ch is not None else AdapterChain(side)

    def with_chain(self, side: str, chain: AdapterChain):
        chains = dict(self.chains)
        chains[side] = chain
        return dataclasses.replace(self, chains=chains)

    def extra_params(self) -> list[ParamTensor]:
        return []

    def params(self) -> list[ParamTensor]:
        """Every parameter reachable from this model, each object once."""
        seen: set[int] = set()
        out = []
        groups = [self.backbone.params()]
        groups += [self.chain(s).params() for s in SIDES]
        groups.append(self.extra_params())
        for group in groups:
            for p in group:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def registry(self) -> ParamRegistry:
        reg = ParamRegistry(self.backbone.registry.rng_seed)
        for p in self.params():
            reg.add(p)
        return reg

    def hidden_states(self, token_ids: np.ndarray, mask: np.ndarray, side: str) -> Tensor:
        return self.backbone.forward(token_ids, mask, self.chain(side))


def encode(model: EncoderModel, token_ids, side: str, mask=None) -> EncodedText:
    ids = np.asarray(token_ids, dtype=np.int64)
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    hidden = model.hidden_states(ids[None, :], mask[None, :], side).data[0]
    return EncodedText(ids, mask, hidden)
