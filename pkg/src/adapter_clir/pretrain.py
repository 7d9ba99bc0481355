"""Synthetic parallel multilingual corpora and masked-language-model pretraining.

Every document is first drawn as a stream of language-independent *concept*
ids and then rendered into each language through that language's vocabulary
bijection and word-order rule, so the collections are parallel by
construction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterChain, LanguageAdapterSet, init_language_adapters
from .core import (
    AdamState,
    ConfigError,
    ParamRegistry,
    ParamTensor,
    Tensor,
    adam_step,
    add,
    backward,
    cross_entropy,
    matmul,
    reshape,
    take,
    transpose,
)
from .encoder import Backbone

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
NUM_RESERVED = 10
SPLITS = ("pretrain", "train", "test")


@dataclass
class SyntheticLanguage:
    tag: str
    vocab_map: np.ndarray  # full-vocabulary permutation, identity on reserved ids
    zipf_s: float = 1.1
    grammar_seed: int = 0

    def __post_init__(self):
        self.vocab_map = np.asarray(self.vocab_map, dtype=np.int64)
        if not np.array_equal(np.sort(self.vocab_map), np.arange(len(self.vocab_map))):
            raise ConfigError(f"vocab_map of {self.tag!r} is not a bijection")
        if not np.array_equal(self.vocab_map[:NUM_RESERVED], np.arange(NUM_RESERVED)):
            raise ConfigError("reserved ids must map to themselves")
        self.inverse_map = np.argsort(self.vocab_map)

    def word_order(self) -> np.ndarray:
        """Permutation applied to consecutive token triples."""
        if self.grammar_seed == 0:
            return np.arange(3)
        return np.random.default_rng(self.grammar_seed).permutation(3)

    def render(self, concepts: np.ndarray) -> np.ndarray:
        ids = self.vocab_map[np.asarray(concepts, dtype=np.int64)]
        order = self.word_order()
        n = len(ids) - len(ids) % 3
        if n and not np.array_equal(order, np.arange(3)):
            ids = ids.copy()
            ids[:n] = ids[:n].reshape(-1, 3)[:, order].reshape(-1)
        return ids

    def unrender(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).copy()
        order = self.word_order()
        n = len(ids) - len(ids) % 3
        if n:
            ids[:n] = ids[:n].reshape(-1, 3)[:, np.argsort(order)].reshape(-1)
        return self.inverse_map[ids]


def make_language(tag: str, vocab_size: int, seed: int, shared_ids=(), zipf_s: float = 1.1) -> SyntheticLanguage:
    """``eng`` renders concepts as themselves; any other tag permutes the
    content ids, leaving ``shared_ids`` (cognates, names) as fixed points."""
    vmap = np.arange(vocab_size)
    if tag == "eng":
        return SyntheticLanguage(tag, vmap, zipf_s, 0)
    rng = np.random.default_rng([seed, *tag.encode()])
    shared = np.zeros(vocab_size, dtype=bool)
    shared[np.asarray(shared_ids, dtype=np.int64)] = True
    movable = np.flatnonzero(~shared & (np.arange(vocab_size) >= NUM_RESERVED))
    vmap[movable] = rng.permutation(movable)
    grammar = int(rng.integers(1, 2**31))
    return SyntheticLanguage(tag, vmap, zipf_s, grammar)


@dataclass
class CorpusSpec:
    languages: list[str] = field(default_factory=lambda: ["eng", "lng1"])
    vocab_size: int = 512
    topic_count: int = 8
    function_words: int = 40
    common_per_topic: int = 20
    keys_per_topic: int = 16
    query_words_per_topic: int = 6
    docs_per_split: dict[str, int] = field(default_factory=lambda: {"pretrain": 400, "train": 300, "test": 200})
    # (min, max, mean) token counts per split; long test documents span several passages
    doc_len: dict[str, tuple[int, int, float]] = field(
        default_factory=lambda: {"pretrain": (24, 260, 70.0), "train": (24, 96, 50.0), "test": (24, 400, 90.0)}
    )
    zipf_s: float = 1.1
    function_rate: float = 0.35
    keys_per_doc: int = 3
    key_rate: float = 0.08
    shared_fraction: float = 0.25

    def validate(self) -> None:
        if len(self.languages) < 2:
            raise ConfigError("need at least two languages")
        if "eng" not in self.languages:
            raise ConfigError('one language must be tagged "eng"')
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError(f"duplicate language tags in {self.languages}")
        need = self.function_words + self.topic_count * (self.common_per_topic + self.keys_per_topic
                                                         + self.query_words_per_topic)
        if need > self.vocab_size - NUM_RESERVED:
            raise ConfigError(f"corpus layout needs {need} content ids, vocabulary has {self.vocab_size - NUM_RESERVED}")


def zipf_probs(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def zipf_sample(rng: np.random.Generator, support: np.ndarray, s: float, size: int) -> np.ndarray:
    """Draw from ``support`` with probability proportional to 1/rank**s (rank = position)."""
    return support[rng.choice(len(support), size=size, p=zipf_probs(len(support), s))]


@dataclass
class Document:
    group: int
    split: str
    topic: int
    keys: np.ndarray
    concepts: np.ndarray


@dataclass
class Corpus:
    spec: CorpusSpec
    languages: dict[str, SyntheticLanguage]
    documents: list[Document]
    topic_words: list[np.ndarray]  # common words then key words, per topic
    function_word_ids: np.ndarray
    query_words: list[np.ndarray]  # per topic; never emitted into documents

    def doc_id(self, lang: str, group: int) -> str:
        return f"{lang}-{group:05d}"

    def docs(self, split: str) -> list[Document]:
        return [d for d in self.documents if d.split == split]

    def rendered(self, split: str, lang: str) -> dict[str, np.ndarray]:
        L = self.languages[lang]
        return {self.doc_id(lang, d.group): L.render(d.concepts) for d in self.docs(split)}

    def alignment(self) -> list[tuple[str, str, int]]:
        return [(self.doc_id(l, d.group), l, d.group) for d in self.documents for l in self.spec.languages]


def _doc_length(rng: np.random.Generator, lo: int, hi: int, mean: float) -> int:
    return int(np.clip(lo + rng.exponential(max(mean - lo, 1.0)), lo, hi))


def generate_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Concept layout: function words shared by all topics; per topic a Zipfian
    set of common words, a pool of rarer key words and a small query register
    that only queries use. Each document mixes its topic's words with function
    words and carries ``keys_per_doc`` keys from its topic's pool."""
    spec.validate()
    rng = np.random.default_rng(seed)
    order = rng.permutation(np.arange(NUM_RESERVED, spec.vocab_size))
    function_ids = order[: spec.function_words]
    pos = spec.function_words
    topic_words, key_pools, query_words = [], [], []
    for _ in range(spec.topic_count):
        common = order[pos : pos + spec.common_per_topic]
        pos += spec.common_per_topic
        keys = order[pos : pos + spec.keys_per_topic]
        pos += spec.keys_per_topic
        query_words.append(order[pos : pos + spec.query_words_per_topic])
        pos += spec.query_words_per_topic
        topic_words.append(np.concatenate([common, keys]))
        key_pools.append(keys)
    all_keys = np.concatenate(key_pools)
    n_shared = int(round(spec.shared_fraction * len(all_keys)))
    shared_ids = np.sort(rng.choice(all_keys, size=n_shared, replace=False))

    docs: list[Document] = []
    group = 0
    for split in SPLITS:
        lo, hi, mean_len = spec.doc_len[split]
        for _ in range(spec.docs_per_split.get(split, 0)):
            topic = int(rng.integers(spec.topic_count))
            n = _doc_length(rng, lo, hi, mean_len)
            keys = np.sort(rng.choice(key_pools[topic], size=spec.keys_per_doc, replace=False))
            stream = zipf_sample(rng, topic_words[topic], spec.zipf_s, n)
            u = rng.random(n)
            func = u < spec.function_rate
            stream[func] = zipf_sample(rng, function_ids, spec.zipf_s, int(func.sum()))
            is_key = (u >= spec.function_rate) & (u < spec.function_rate + spec.key_rate)
            stream[is_key] = rng.choice(keys, size=int(is_key.sum()))
            # every key appears at least once
            stream[rng.choice(n, size=len(keys), replace=False)] = keys
            docs.append(Document(group, split, topic, keys, stream))
            group += 1

    langs = {t: make_language(t, spec.vocab_size, seed, shared_ids, spec.zipf_s) for t in spec.languages}
    return Corpus(spec, langs, docs, topic_words, function_ids, query_words)


def make_queries(corpus: Corpus, split: str, seed: int, per_doc: float = 1.0, length: tuple[int, int] = (6, 12),
                 function_share: float = 0.3):
    """Concept-level queries for documents of ``split``.

    A query is drawn from its source document's topic register (words that
    never occur in documents) plus function words, so no query term matches
    a relevant document lexically. Returns ``(queries, qrels)``: query id ->
    (source group, concepts), and query id -> {group: relevance} with 2 for
    the source document and 1 for every other document of the same topic.
    """
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    docs = corpus.docs(split)
    s = corpus.spec
    n_q = int(round(per_doc * len(docs)))
    chosen = sorted(rng.choice(len(docs), size=n_q, replace=False)) if n_q < len(docs) else range(len(docs))
    queries, qrels = {}, {}
    for j, i in enumerate(chosen):
        d = docs[i]
        n = int(rng.integers(length[0], length[1] + 1))
        n_func = int(round(function_share * n))
        q = np.concatenate([zipf_sample(rng, corpus.query_words[d.topic], s.zipf_s, n - n_func),
                            zipf_sample(rng, corpus.function_word_ids, s.zipf_s, n_func)])
        q = q[rng.permutation(len(q))]
        qid = f"{split}-q{j:04d}"
        queries[qid] = (d.group, q)
        rel = {o.group: 1 for o in docs if o.topic == d.topic}
        rel[d.group] = 2
        qrels[qid] = rel
    return queries, qrels


# ---------------------------------------------------------------------------
# corpus files


def write_corpus(corpus: Corpus, root: str | Path) -> None:
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
        for lang in corpus.spec.languages:
            with open(root / split / f"{lang}.jsonl", "w") as f:
                for doc_id, ids in corpus.rendered(split, lang).items():
                    f.write(json.dumps({"doc_id": doc_id, "lang": lang, "token_ids": ids.tolist()}) + "\n")
    with open(root / "alignment.tsv", "w") as f:
        f.write("doc_id\tlang\tparallel_group_id\n")
        for doc_id, lang, g in corpus.alignment():
            f.write(f"{doc_id}\t{lang}\t{g}\n")


def read_jsonl(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["doc_id"]] = np.asarray(rec["token_ids"], dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# masked language modelling


def mlm_mask(token_ids, rate: float = 0.15, seed: int | np.random.Generator = 0, vocab_size: int = 512):
    """BERT-style corruption: pick non-reserved positions at ``rate``; of those
    80% become MASK, 10% a random content token, 10% stay unchanged."""
    if not 0 < rate < 1:
        raise ConfigError(f"mask rate must be in (0, 1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(token_ids, dtype=np.int64)
    out = ids.copy()
    u = rng.random(ids.shape)
    picked = (u < rate) & (ids >= NUM_RESERVED)
    action = rng.random(ids.shape)
    random_ids = rng.integers(NUM_RESERVED, vocab_size, size=ids.shape)
    out[picked & (action < 0.8)] = MASK
    swap = picked & (action >= 0.8) & (action < 0.9)
    out[swap] = random_ids[swap]
    return out, np.flatnonzero(picked.reshape(-1))


def chunk_sequences(docs, seq_len: int = 64) -> np.ndarray:
    """Cut documents into ``[CLS] + (seq_len - 1)`` token rows, PAD-filled at the end."""
    rows = []
    body = seq_len - 1
    for ids in docs:
        for s in range(0, len(ids), body):
            piece = ids[s : s + body]
            if len(piece) < 8:
                continue
            row = np.full(seq_len, PAD, dtype=np.int64)
            row[0] = CLS
            row[1 : 1 + len(piece)] = piece
            rows.append(row)
    return np.stack(rows)


class MLMHead:
    """Output projection tied to the token embeddings plus a vocabulary bias."""

    def __init__(self, backbone: Backbone, registry: ParamRegistry | None = None):
        self.backbone = backbone
        reg = registry if registry is not None else ParamRegistry(backbone.config.seed)
        self.registry = reg
        if "mlm.bias" not in reg:
            reg.create("mlm.bias", (backbone.config.vocab_size,), init="zeros")

    @property
    def bias(self) -> ParamTensor:
        return self.registry["mlm.bias"]

    def params(self) -> list[ParamTensor]:
        return [self.bias]

    def loss(self, rows: np.ndarray, rng: np.random.Generator, chain: AdapterChain | None = None, rate: float = 0.15) -> Tensor:
        rows = np.asarray(rows)
        mask = rows != PAD
        corrupted, positions = mlm_mask(rows, rate, rng, self.backbone.config.vocab_size)
        if len(positions) == 0:
            positions = np.array([int(np.flatnonzero(mask.reshape(-1))[-1])])
        hidden = self.backbone.forward(corrupted, mask, chain)
        picked = take(reshape(hidden, (-1, hidden.shape[-1])), positions)
        logits = add(matmul(picked, transpose(self.backbone["embeddings.token"], (1, 0))), self.bias)
        return cross_entropy(logits, rows.reshape(-1)[positions])


def _train_mlm(head: MLMHead, rows: np.ndarray, trainable: list[ParamTensor], steps: int, batch: int, lr: float,
               seed: int, chain: AdapterChain | None) -> list[float]:
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses = []
    for step in range(steps):
        idx = rng.choice(len(rows), size=min(batch, len(rows)), replace=False)
        loss = head.loss(rows[idx], rng, chain)
        for p in trainable:
            p.grad = None
        backward(loss)
        adam_step(trainable, state, lr)
        losses.append(float(loss.data))
        if step % 200 == 0:
            log.info("mlm step %d loss %.4f", step, losses[-1])
    return losses


def mlm_eval(head: MLMHead, rows: np.ndarray, seed: int, chain: AdapterChain | None = None, batch: int = 32) -> float:
    """Mean masked-token cross-entropy over ``rows`` with a fixed masking seed."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for s in range(0, len(rows), batch):
        part = rows[s : s + batch]
        loss = head.loss(part, rng, chain)
        total += float(loss.data) * len(part)
        count += len(part)
    return total / count


def pretrain_backbone(backbone: Backbone, head: MLMHead, rows: np.ndarray, steps: int = 2000, batch: int = 16,
                      lr: float = 1e-3, seed: int = 0) -> list[float]:
    """MLM over a mixed-language row set with every backbone parameter trainable."""
    params = backbone.params() + head.params()
    for p in params:
        p.trainable = True
    return _train_mlm(head, rows, params, steps, batch, lr, seed, None)


def pretrain_language_adapter(backbone: Backbone, head: MLMHead, language_tag: str, rows: np.ndarray,
                              steps: int = 1000, batch: int = 16, lr: float = 1e-3, seed: int = 0,
                              languages: dict | None = None) -> LanguageAdapterSet:
    """Train r=2 language adapters for one language; backbone and MLM head stay frozen."""
    if languages is not None and language_tag not in languages:
        raise LookupError(f"unknown language {language_tag!r}; available: {', '.join(sorted(languages))}")
    for p in backbone.params() + head.params():
        p.trainable = False
    c = backbone.config
    lang = init_language_adapters(language_tag, c.hidden, c.layers, seed)
    for p in lang.params():
        p.trainable = True
    chain = AdapterChain("document", lang, None)
    _train_mlm(head, rows, lang.params(), steps, batch, lr, seed, chain)
    for p in lang.params():
        p.trainable = False
    return lang
