"""Experiment phases over a run directory.

Layout::

    run_dir/
      config.json                     resolved config (all seeds filled in)
      manifest.json                   git describe, seeds, sha256 of every artifact
      corpus/{split}/{lang}.jsonl     documents
      corpus/alignment.tsv
      queries/{split}.jsonl           {"query_id", "lang", "token_ids", "source_doc"}
      qrels/{split}.{lang}.qrels      TREC qrels
      backbone/params.ckpt, backbone.json, loss.csv
      adapters/{lang}/params.ckpt, adapter.json, loss-free (metadata only)
      models/{variant}-{mode}/params.ckpt, model.json, loss.csv, triples.tsv
      indexes/{variant}.{row}.{lang}/index.npy, manifest.json
      runs/{table}/{variant}.{row}.{lang}.trec
      report/report.txt, report.csv, summary.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterCatalog
from .config import ExperimentConfig
from .core import ConfigError, ParamRegistry, load_checkpoint, save_checkpoint
from .encoder import Backbone, EncoderConfig
from .evaluation import MetricTable, Run, average_precision, ndcg_at_k, read_qrels, read_run, render_report, write_qrels, write_run
from .pipeline import Condition, Index, build_index, encode_queries, make_triples, search, segment_passages
from .pretrain import CorpusSpec, MLMHead, chunk_sequences, generate_corpus, make_queries, pretrain_backbone, pretrain_language_adapter, read_jsonl, write_corpus
from .retrieval import build_model, load_model, save_model, train_retrieval, trainable_fraction

log = logging.getLogger(__name__)

VARIANT_LABEL = {"dpr": "DPR", "colbert": "ColBERT"}


class PhaseOrderError(RuntimeError):
    pass


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    def __init__(self, root: str | Path, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "config.json"
        text = cfg.dumps()
        if cfg_path.exists() and cfg_path.read_text() != text:
            raise ConfigError(f"{self.root} holds a run with a different config; use a fresh --run-dir")
        cfg_path.write_text(text)

    def __truediv__(self, rel: str) -> Path:
        return self.root / rel

    def require(self, rel: str, phase: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise PhaseOrderError(f"missing {rel}; run `{phase}` first")
        return p

    def write_manifest(self) -> dict:
        artifacts = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                artifacts[str(p.relative_to(self.root))] = sha256_file(p)
        c = self.cfg
        manifest = {
            "git_describe": git_describe(),
            "seeds": {"global": c.seed, "corpus": c.corpus.seed, "backbone": c.backbone.seed, "adapters": c.adapters.seed,
                      "retrieval": c.retrieval.seed, "eval": c.eval.seed},
            "artifacts": artifacts,
        }
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest


def corpus_spec(cfg: ExperimentConfig) -> CorpusSpec:
    c = cfg.corpus
    return CorpusSpec(languages=list(c.languages), vocab_size=cfg.backbone.vocab_size, topic_count=c.topic_count,
                      docs_per_split=dict(CorpusSpec().docs_per_split, **c.docs_per_split), zipf_s=c.zipf_s,
                      shared_fraction=c.shared_fraction)


def encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    b = cfg.backbone
    return EncoderConfig(b.layers, b.hidden, b.heads, b.ffn_dim, b.vocab_size, b.max_positions, b.seed)


def _write_losses(path: Path, losses: list[float]) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v!r}\n")


# ---------------------------------------------------------------------------
# phases


def phase_gen_corpus(rd: RunDir) -> None:
    cfg = rd.cfg
    corpus = generate_corpus(corpus_spec(cfg), cfg.corpus.seed)
    write_corpus(corpus, rd / "corpus")
    (rd / "queries").mkdir(exist_ok=True)
    (rd / "qrels").mkdir(exist_ok=True)
    for split, per_doc in (("train", cfg.corpus.train_queries_per_doc), ("test", 1.0)):
        queries, qrels = make_queries(corpus, split, cfg.corpus.seed, per_doc=per_doc)
        eng = corpus.languages["eng"]
        with open(rd / "queries" / f"{split}.jsonl", "w") as f:
            for qid, (group, concepts) in queries.items():
                f.write(json.dumps({"query_id": qid, "lang": "eng", "token_ids": eng.render(concepts).tolist(),
                                    "source_doc": corpus.doc_id("eng", group)}) + "\n")
        for lang in cfg.corpus.languages:
            write_qrels(rd / "qrels" / f"{split}.{lang}.qrels",
                        {q: {corpus.doc_id(lang, g): r for g, r in rel.items()} for q, rel in qrels.items()})


def read_queries(path: Path) -> dict[str, tuple[str, np.ndarray]]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out[r["query_id"]] = (r["source_doc"], np.asarray(r["token_ids"], dtype=np.int64))
    return out


def _pretrain_rows(rd: RunDir, lang: str) -> np.ndarray:
    docs = read_jsonl(rd.require(f"corpus/pretrain/{lang}.jsonl", "gen-corpus"))
    return chunk_sequences([docs[k] for k in sorted(docs)], rd.cfg.backbone.seq_len)


def phase_pretrain_backbone(rd: RunDir) -> None:
    cfg = rd.cfg
    rows = np.concatenate([_pretrain_rows(rd, l) for l in cfg.corpus.languages])
    backbone = Backbone(encoder_config(cfg))
    head = MLMHead(backbone)
    b = cfg.backbone
    losses = pretrain_backbone(backbone, head, rows, b.steps, b.batch, b.lr, b.seed)
    out = rd / "backbone"
    out.mkdir(exist_ok=True)
    save_checkpoint(out / "params.ckpt", backbone.params() + head.params())
    (out / "backbone.json").write_text(json.dumps(dataclasses.asdict(backbone.config), indent=1, sort_keys=True) + "\n")
    _write_losses(out / "loss.csv", losses)


def load_backbone(rd: RunDir) -> tuple[Backbone, MLMHead]:
    path = rd.require("backbone/params.ckpt", "pretrain-backbone")
    conf = EncoderConfig(**json.loads((rd / "backbone" / "backbone.json").read_text()))
    reg, head_reg = ParamRegistry(conf.seed), ParamRegistry(conf.seed)
    for p in load_checkpoint(path):
        p.trainable = False
        (head_reg if p.name.startswith("mlm.") else reg).add(p)
    backbone = Backbone(conf, reg)
    return backbone, MLMHead(backbone, head_reg)


def phase_pretrain_adapter(rd: RunDir, languages: list[str] | None = None) -> None:
    cfg = rd.cfg
    languages = languages or list(cfg.corpus.languages)
    backbone, head = load_backbone(rd)
    a = cfg.adapters
    catalog = AdapterCatalog()
    for i, lang in enumerate(languages):
        if lang not in cfg.corpus.languages:
            raise LookupError(f"unknown language {lang!r}; available: {', '.join(cfg.corpus.languages)}")
        entry = pretrain_language_adapter(backbone, head, lang, _pretrain_rows(rd, lang), a.steps, a.batch, a.lr,
                                          a.seed + i)
        catalog.add(entry, backbone.config.layers)
    catalog.save(rd / "adapters")


def load_catalog(rd: RunDir) -> AdapterCatalog:
    rd.require("adapters", "pretrain-adapter")
    return AdapterCatalog.load(rd / "adapters")


def model_dir(variant: str, mode: str) -> str:
    return f"models/{variant}-{mode}"


def phase_train(rd: RunDir, variants: list[str] | None = None, modes: list[str] | None = None) -> None:
    cfg = rd.cfg
    r = cfg.retrieval
    backbone, _ = load_backbone(rd)
    catalog = load_catalog(rd) if (rd / "adapters").exists() else AdapterCatalog()
    docs = read_jsonl(rd.require("corpus/train/eng.jsonl", "gen-corpus"))
    queries = read_queries(rd.require("queries/train.jsonl", "gen-corpus"))
    qrels = read_qrels(rd / "qrels" / "train.eng.qrels")
    triples = make_triples(docs, queries, qrels, r.seed, r.triples_per_query)
    for variant in variants or r.variants:
        for j, mode in enumerate(modes or r.modes):
            if mode == "adapter" and "eng" not in catalog:
                raise PhaseOrderError("adapter mode needs the eng language adapter; run `pretrain-adapter` first")
            model = build_model(backbone, catalog, variant, mode, r.reduction_factor, r.seed)
            t0 = time.time()
            result = train_retrieval(model, triples, r.steps, r.lr, r.seed + j, r.batch)
            out = rd / model_dir(variant, mode)
            save_model(model, out, {"trainable_percent": trainable_fraction(model),
                                    "layer0_task_grad": any(n.startswith("task.") and ".layer.0." in n for n in result.nonzero_grad)})
            _write_losses(out / "loss.csv", result.losses)
            log.info("trained %s/%s in %.1fs", variant, mode, time.time() - t0)
    _write_triples(rd / "models" / "triples.tsv", docs, queries, qrels, r.seed, r.triples_per_query)


def _write_triples(path: Path, docs, queries, qrels, seed: int, per_query: int) -> None:
    """Passage ids are ``doc_id#passage_index`` into the train-split corpus JSONL."""
    rng = np.random.default_rng(seed)
    doc_ids = sorted(docs)
    passages = {d: segment_passages(docs[d], doc_id=d) for d in doc_ids}
    with open(path, "w") as f:
        f.write("query_id\tpositive_passage_id\tnegative_passage_id\n")
        for qid in sorted(queries):
            src, _ = queries[qid]
            nonrel = [d for d in doc_ids if qrels[qid].get(d, 0) == 0]
            for _ in range(per_query):
                pos = int(rng.integers(len(passages[src])))
                nd = nonrel[int(rng.integers(len(nonrel)))]
                neg = int(rng.integers(len(passages[nd])))
                f.write(f"{qid}\t{src}#{pos}\t{nd}#{neg}\n")


# ---------------------------------------------------------------------------
# grid: (table, variant, row) -> which trained model and which conditions


@dataclass(frozen=True)
class GridRow:
    table: str  # "clir" or "mono"
    variant: str
    row: str
    mode: str  # model directory mode, or "untrained"

    def condition(self, doc_lang: str) -> Condition:
        if self.mode in ("fmft", "adapter-no-lang"):
            return Condition(self.row, None, None)
        if self.row == "E-E" or self.mode == "untrained":
            return Condition("E-E", "eng", "eng")
        if self.row == "E-D":
            return Condition("E-D", "eng", doc_lang)
        if self.row == "D-D":
            return Condition("D-D", doc_lang, doc_lang)
        raise ConfigError(f"unknown row {self.row}")


def grid_rows(cfg: ExperimentConfig) -> list[GridRow]:
    rows = []
    modes = cfg.retrieval.modes
    for v in cfg.retrieval.variants:
        if "fmft" in modes:
            rows.append(GridRow("clir", v, "FMFT", "fmft"))
        if "adapter" in modes:
            rows += [GridRow("clir", v, c, "adapter") for c in cfg.conditions]
        if "adapter-no-lang" in modes:
            rows.append(GridRow("clir", v, "no-LA", "adapter-no-lang"))
        rows.append(GridRow("mono", v, "untrained", "untrained"))
        if "fmft" in modes:
            rows.append(GridRow("mono", v, "FMFT", "fmft"))
        if "adapter" in modes:
            rows.append(GridRow("mono", v, "E-E", "adapter"))
        if "adapter-no-lang" in modes:
            rows.append(GridRow("mono", v, "no-LA", "adapter-no-lang"))
    return rows


def table_languages(cfg: ExperimentConfig, table: str) -> list[str]:
    return [l for l in cfg.corpus.languages if l != "eng"] if table == "clir" else ["eng"]


class ModelCache:
    def __init__(self, rd: RunDir):
        self.rd = rd
        self._models: dict[tuple[str, str], object] = {}
        self._catalog = None

    def catalog(self) -> AdapterCatalog:
        if self._catalog is None:
            self._catalog = load_catalog(self.rd) if (self.rd / "adapters").exists() else AdapterCatalog()
        return self._catalog

    def get(self, variant: str, mode: str):
        key = (variant, mode)
        if key not in self._models:
            if mode == "untrained":
                backbone, _ = load_backbone(self.rd)
                r = self.rd.cfg.retrieval
                self._models[key] = build_model(backbone, self.catalog(), variant, "untrained", r.reduction_factor, r.seed)
            else:
                path = self.rd.require(model_dir(variant, mode) + "/model.json", "train")
                self._models[key] = load_model(path.parent, self.catalog())
        return self._models[key]


def _index_name(g: GridRow, lang: str) -> str:
    cond = g.condition(lang)
    return f"indexes/{g.variant}.{g.mode}.{cond.doc_lang or 'none'}.{lang}"


def phase_index(rd: RunDir) -> None:
    models = ModelCache(rd)
    done = set()
    for g in grid_rows(rd.cfg):
        for lang in table_languages(rd.cfg, g.table):
            name = _index_name(g, lang)
            if name in done:
                continue
            docs = read_jsonl(rd.require(f"corpus/test/{lang}.jsonl", "gen-corpus"))
            build_index(docs, models.get(g.variant, g.mode), g.condition(lang)).save(rd / name)
            done.add(name)


def phase_search(rd: RunDir, threads: int = 1) -> None:
    models = ModelCache(rd)
    queries = {q: ids for q, (_, ids) in read_queries(rd.require("queries/test.jsonl", "gen-corpus")).items()}
    qrep_cache: dict[tuple, dict] = {}
    for g in grid_rows(rd.cfg):
        for lang in table_languages(rd.cfg, g.table):
            model = models.get(g.variant, g.mode)
            cond = g.condition(lang)
            index = Index.load(rd.require(_index_name(g, lang), "index"))
            qkey = (g.variant, g.mode, cond.query_lang)
            if qkey not in qrep_cache:
                qrep_cache[qkey] = encode_queries(queries, model, cond)
            run = parallel_search(index, queries, model, cond, rd.cfg.eval.k, qrep_cache[qkey], threads)
            out = rd / "runs" / g.table
            out.mkdir(parents=True, exist_ok=True)
            write_run(out / f"{g.variant}.{g.row}.{lang}.trec", run, f"{g.variant}-{g.row}")


def parallel_search(index, queries, model, cond, k, qreps, threads: int) -> Run:
    if threads <= 1:
        return search(index, queries, model, cond, k, qreps)
    qids = sorted(queries)
    chunks = [qids[i::threads] for i in range(threads)]
    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(lambda ch: search(index, {q: queries[q] for q in ch}, model, cond, k, qreps), chunks))
    run: Run = {}
    for p in parts:
        run.update(p)
    return {q: run[q] for q in qids}


def build_tables(rd: RunDir) -> dict[str, dict[str, MetricTable]]:
    cfg = rd.cfg
    tables: dict[str, dict[str, MetricTable]] = {}
    metrics = [f"nDCG@{c}" for c in cfg.eval.cutoffs] + ["MAP"]
    for table in ("clir", "mono"):
        langs = table_languages(cfg, table)
        qrels = {l: read_qrels(rd.require(f"qrels/test.{l}.qrels", "gen-corpus")) for l in langs}
        tables[table] = {m: MetricTable(f"{'CLIR' if table == 'clir' else 'Monolingual English'} {m}", langs) for m in metrics}
        for g in [g for g in grid_rows(cfg) if g.table == table]:
            per = {m: {} for m in metrics}
            for lang in langs:
                run = read_run(rd.require(f"runs/{table}/{g.variant}.{g.row}.{lang}.trec", "search"))
                for c in cfg.eval.cutoffs:
                    per[f"nDCG@{c}"][lang] = ndcg_at_k(run, qrels[lang], c)[0]
                per["MAP"][lang] = average_precision(run, qrels[lang])[0]
            for m in metrics:
                tables[table][m].add_row(VARIANT_LABEL[g.variant], g.row, per[m])
        for t in tables[table].values():
            t.mark_significance(alpha=cfg.eval.alpha)
    return tables


def phase_evaluate(rd: RunDir) -> dict:
    cfg = rd.cfg
    tables = build_tables(rd)
    ordered = [tables[t][m] for t in ("clir", "mono") for m in tables[t]]
    text, csv_text = render_report(ordered, metric="per table", alpha=cfg.eval.alpha)
    out = rd / "report"
    out.mkdir(exist_ok=True)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv_text)
    mono10 = tables["mono"].get("nDCG@10")
    summary = {"ee_vs_untrained_ndcg10": {}, "trainable_percent": {}}
    if mono10 is not None:
        for v in cfg.retrieval.variants:
            label = VARIANT_LABEL[v]
            ee = mono10.rows.get((label, "E-E"))
            base = mono10.rows.get((label, "untrained"))
            if ee and base:
                summary["ee_vs_untrained_ndcg10"][v] = {"E-E": ee["eng"].value, "untrained": base["eng"].value,
                                                        "gain": ee["eng"].value - base["eng"].value}
    for v in cfg.retrieval.variants:
        for m in cfg.retrieval.modes:
            p = rd / model_dir(v, m) / "model.json"
            if p.exists():
                summary["trainable_percent"][f"{v}-{m}"] = json.loads(p.read_text()).get("trainable_percent")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def run_experiment(rd: RunDir, threads: int = 1) -> dict:
    steps = [
        ("gen-corpus", lambda: phase_gen_corpus(rd)),
        ("pretrain-backbone", lambda: phase_pretrain_backbone(rd)),
        ("pretrain-adapter", lambda: phase_pretrain_adapter(rd)),
        ("train", lambda: phase_train(rd)),
        ("index", lambda: phase_index(rd)),
        ("search", lambda: phase_search(rd, threads)),
    ]
    for name, fn in steps:
        t0 = time.time()
        fn()
        log.info("%s done in %.1fs", name, time.time() - t0)
    summary = phase_evaluate(rd)
    rd.write_manifest()
    return summary
