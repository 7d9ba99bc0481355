"""Passage segmentation, indexing, exhaustive search and the language-adapter condition grid."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterChain
from .core import ConfigError
from .encoder import trim_padding
from .evaluation import MetricTable, Qrels, Run, average_precision, ndcg_at_k
from .pretrain import CLS, PAD
from .retrieval import DOC_LEN, QUERY_LEN, BiEncoderModel, Triple, score_colbert, score_dpr

WINDOW = 180
STRIDE = 90
ENCODE_BATCH = 32


class AggregationError(ValueError):
    pass


class StalenessError(RuntimeError):
    pass


def pad_or_truncate(token_ids, target_len: int, pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(token_ids, dtype=np.int64)[:target_len]
    out = np.full(target_len, pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(target_len, dtype=bool)
    mask[: len(ids)] = True
    return out, mask


def frame_query(tokens) -> np.ndarray:
    return pad_or_truncate(np.concatenate([[CLS], tokens]), QUERY_LEN)[0]


def frame_passage(tokens) -> np.ndarray:
    # CLS takes one slot, so a full 180-token window drops its last token;
    # the 90-token overlap covers it in the next window
    return pad_or_truncate(np.concatenate([[CLS], tokens]), DOC_LEN)[0]


@dataclass
class Passage:
    doc_id: str
    passage_index: int
    offset: int
    token_ids: np.ndarray


def segment_passages(doc_tokens, window: int = WINDOW, stride: int = STRIDE, doc_id: str = "") -> list[Passage]:
    """Windows at offsets 0, stride, 2*stride, ... stopping at the first window
    that reaches the end of the document."""
    if window <= 0 or not 0 < stride <= window:
        raise ConfigError(f"bad window/stride {window}/{stride}")
    tokens = np.asarray(doc_tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise ValueError(f"document {doc_id!r} is empty")
    out = []
    offset = 0
    while True:
        out.append(Passage(doc_id, len(out), offset, tokens[offset : offset + window]))
        if offset + window >= len(tokens):
            return out
        offset += stride


def maxp(passage_scores) -> float:
    scores = list(passage_scores)
    if not scores:
        raise AggregationError("document has no passage scores")
    return max(scores)


@dataclass(frozen=True)
class Condition:
    name: str
    query_lang: str | None
    doc_lang: str | None


def standard_conditions(doc_lang: str) -> list[Condition]:
    return [
        Condition("E-E", "eng", "eng"),
        Condition("E-D", "eng", doc_lang),
        Condition("D-D", doc_lang, doc_lang),
    ]


def apply_condition(model: BiEncoderModel, condition: Condition) -> BiEncoderModel:
    """Install the condition's language adapters; models trained without language
    adapters only accept the adapter-free condition."""
    has_lang = model.chain("query").language is not None or model.chain("document").language is not None
    if condition.query_lang is None and condition.doc_lang is None:
        if has_lang:
            raise ConfigError(f"model was trained with language adapters; condition {condition.name} has none")
        return model
    if model.mode in ("fmft", "adapter-no-lang"):
        raise ConfigError(f"{model.mode} model has no language-adapter slots for {condition.name}")
    for side, tag in (("query", condition.query_lang), ("document", condition.doc_lang)):
        entry = model.catalog.get(tag)
        model = model.with_chain(side, AdapterChain(side, entry, model.chain(side).task))
    return model


# ---------------------------------------------------------------------------
# encoding


def encode_rows(model: BiEncoderModel, rows: list[np.ndarray], side: str, batch: int = ENCODE_BATCH):
    """Encode fixed-length framed rows. DPR returns an [N, h] array; ColBERT a list
    of [n_real, 128] arrays holding only unmasked token vectors."""
    order = sorted(range(len(rows)), key=lambda i: (int((rows[i] != PAD).sum()), i))
    out: list = [None] * len(rows)
    for s in range(0, len(order), batch):
        idx = order[s : s + batch]
        ids = np.stack([rows[i] for i in idx])
        ids, mask = trim_padding(ids, ids != PAD)
        rep = model.represent(ids, mask, side).data
        for j, i in enumerate(idx):
            out[i] = rep[j].copy() if model.variant == "dpr" else rep[j][mask[j]].copy()
    return np.stack(out) if model.variant == "dpr" and out else out


@dataclass
class Index:
    variant: str
    condition: str
    doc_lang: str | None
    model_checksum: str
    passages: list[tuple[str, int, int]]  # (doc_id, passage_index, offset)
    vectors: np.ndarray | None = None  # DPR [P, h]
    token_vectors: list[np.ndarray] = field(default_factory=list)  # ColBERT, per passage

    def checksum(self) -> str:
        h = hashlib.sha256(f"{self.variant}|{self.condition}|{self.doc_lang}|{self.model_checksum}".encode())
        for doc, pi, off in self.passages:
            h.update(f"{doc}:{pi}:{off};".encode())
        if self.vectors is not None:
            h.update(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
        for t in self.token_vectors:
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()

    def passage_rep(self, i: int) -> np.ndarray:
        return self.vectors[i] if self.variant == "dpr" else self.token_vectors[i]

    def save(self, root: str | Path) -> None:
        """``index.npy`` holds the stacked vectors; ``manifest.json`` the provenance
        and, for ColBERT, per-passage row counts."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        if self.variant == "dpr":
            data = self.vectors
            counts = [1] * len(self.passages)
        else:
            data = np.concatenate(self.token_vectors) if self.token_vectors else np.zeros((0, 128))
            counts = [len(t) for t in self.token_vectors]
        np.save(root / "index.npy", np.ascontiguousarray(data, dtype="<f8"))
        manifest = {
            "variant": self.variant,
            "condition": self.condition,
            "doc_lang": self.doc_lang,
            "model_checksum": self.model_checksum,
            "passages": [list(p) for p in self.passages],
            "rows_per_passage": counts,
            "index_checksum": self.checksum(),
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, root: str | Path) -> "Index":
        root = Path(root)
        m = json.loads((root / "manifest.json").read_text())
        data = np.load(root / "index.npy")
        idx = cls(m["variant"], m["condition"], m["doc_lang"], m["model_checksum"], [tuple(p) for p in m["passages"]])
        if idx.variant == "dpr":
            idx.vectors = data
        else:
            bounds = np.cumsum([0] + m["rows_per_passage"])
            idx.token_vectors = [data[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1)]
        return idx


def build_index(docs: dict[str, np.ndarray], model: BiEncoderModel, condition: Condition) -> Index:
    view = apply_condition(model, condition)
    passages, rows = [], []
    for doc_id in sorted(docs):
        for p in segment_passages(docs[doc_id], doc_id=doc_id):
            passages.append((doc_id, p.passage_index, p.offset))
            rows.append(frame_passage(p.token_ids))
    reps = encode_rows(view, rows, "document")
    idx = Index(model.variant, condition.name, condition.doc_lang, view.side_checksum("document"), passages)
    if model.variant == "dpr":
        idx.vectors = reps
    else:
        idx.token_vectors = reps
    return idx


def encode_queries(queries: dict[str, np.ndarray], model: BiEncoderModel, condition: Condition) -> dict[str, np.ndarray]:
    view = apply_condition(model, condition)
    qids = sorted(queries)
    reps = encode_rows(view, [frame_query(queries[q]) for q in qids], "query")
    return dict(zip(qids, reps))


def rank_documents(doc_scores: dict[str, float], k: int) -> list[tuple[str, float]]:
    """Descending score, ties by ascending doc_id."""
    return sorted(doc_scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def search(index: Index, queries: dict[str, np.ndarray], model: BiEncoderModel, condition: Condition,
           k: int = 100, query_reps: dict[str, np.ndarray] | None = None) -> Run:
    view = apply_condition(model, condition)
    if view.side_checksum("document") != index.model_checksum:
        raise StalenessError("index was built by a different model or document-side adapter")
    if query_reps is None:
        query_reps = encode_queries(queries, model, condition)
    score = score_dpr if index.variant == "dpr" else score_colbert
    run: Run = {}
    for qid in sorted(queries):
        q = query_reps[qid]
        best: dict[str, float] = {}
        for i, (doc_id, _, _) in enumerate(index.passages):
            s = score(q, index.passage_rep(i))
            if doc_id not in best or s > best[doc_id]:
                best[doc_id] = s
        run[qid] = rank_documents(best, k)
    return run


# ---------------------------------------------------------------------------
# training data


def make_triples(docs: dict[str, np.ndarray], queries: dict[str, tuple[str, np.ndarray]], qrels: Qrels,
                 seed: int, per_query: int = 4) -> list[Triple]:
    """(query, passage of its source document, passage of a nonrelevant document)."""
    rng = np.random.default_rng(seed)
    doc_ids = sorted(docs)
    passages = {d: segment_passages(docs[d], doc_id=d) for d in doc_ids}
    triples = []
    for qid in sorted(queries):
        src, q = queries[qid]
        nonrel = [d for d in doc_ids if qrels[qid].get(d, 0) == 0]
        qrow = frame_query(q)
        for _ in range(per_query):
            ps = passages[src]
            pos = ps[int(rng.integers(len(ps)))]
            nd = nonrel[int(rng.integers(len(nonrel)))]
            neg = passages[nd][int(rng.integers(len(passages[nd])))]
            triples.append(Triple(qrow, frame_passage(pos.token_ids), frame_passage(neg.token_ids)))
    return triples


# ---------------------------------------------------------------------------
# condition grid


@dataclass
class GridEntry:
    """One table row: a trained model evaluated under one inference condition."""

    model_name: str  # e.g. "DPR"
    row: str  # e.g. "FMFT", "E-E", "no-LA"
    model: BiEncoderModel
    condition_for: dict[str, Condition]  # document language -> condition


@dataclass
class GridResult:
    runs: dict[tuple[str, str, str], Run]
    tables: dict[str, MetricTable]


def run_condition_grid(entries: list[GridEntry], collections: dict[str, dict[str, np.ndarray]],
                       queries: dict[str, np.ndarray], qrels_by_lang: dict[str, Qrels], k: int = 100,
                       cutoffs: tuple[int, ...] = (100, 10)) -> GridResult:
    """Search every (row, language) pair; tables hold nDCG@cutoff and MAP with one
    column per document language."""
    langs = sorted(collections)
    runs: dict[tuple[str, str, str], Run] = {}
    index_cache: dict[tuple[int, str, str | None], Index] = {}
    qrep_cache: dict[tuple[int, str | None], dict[str, np.ndarray]] = {}
    tables = {f"nDCG@{c}": MetricTable(f"nDCG@{c}", langs) for c in cutoffs}
    tables["MAP"] = MetricTable("MAP", langs)
    for e in entries:
        per = {name: {} for name in tables}
        for lang in langs:
            cond = e.condition_for[lang]
            ikey = (id(e.model), lang, cond.doc_lang)
            if ikey not in index_cache:
                index_cache[ikey] = build_index(collections[lang], e.model, cond)
            qkey = (id(e.model), cond.query_lang)
            if qkey not in qrep_cache:
                qrep_cache[qkey] = encode_queries(queries, e.model, cond)
            run = search(index_cache[ikey], queries, e.model, cond, k, qrep_cache[qkey])
            runs[(e.model_name, e.row, lang)] = run
            for c in cutoffs:
                per[f"nDCG@{c}"][lang] = ndcg_at_k(run, qrels_by_lang[lang], c)[0]
            per["MAP"][lang] = average_precision(run, qrels_by_lang[lang])[0]
        for name, t in tables.items():
            t.add_row(e.model_name, e.row, per[name])
    for t in tables.values():
        t.mark_significance()
    return GridResult(runs, tables)
