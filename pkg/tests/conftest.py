import json
from pathlib import Path

import numpy as np
import pytest

from adapter_clir.core import Tensor, backward, mul, total
from adapter_clir.encoder import Backbone, EncoderConfig
from adapter_clir.pretrain import CorpusSpec, generate_corpus

FIXTURES = Path(__file__).parent / "fixtures"

TINY = EncoderConfig(layers=2, hidden=16, heads=2, ffn_dim=32, vocab_size=512, max_positions=192, seed=3)


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


def numeric_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(build, params, step: float = 1e-4):
    """``build()`` returns a Tensor; its weighted sum against a fixed random
    probe is the scalar loss. Returns the worst relative error over ``params``."""
    probe_rng = np.random.default_rng(123)
    probe = None

    def loss_tensor():
        nonlocal probe
        out = build()
        if probe is None:
            probe = probe_rng.normal(size=out.shape)
        return total(mul(out, Tensor(probe)))

    for p in params:
        p.grad = None
    backward(loss_tensor())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: float(loss_tensor().data), p.data, step)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(docs_per_split={"pretrain": 60, "train": 40, "test": 30})
    return generate_corpus(spec, seed=11)


@pytest.fixture
def tiny_backbone():
    return Backbone(TINY)


def split_data(corpus, split="train", lang="eng", seed=1):
    """Docs, queries (source doc id, eng tokens) and qrels keyed by ``lang`` doc ids."""
    from adapter_clir.pretrain import make_queries

    docs = corpus.rendered(split, lang)
    raw, groups = make_queries(corpus, split, seed)
    eng = corpus.languages["eng"]
    queries = {q: (corpus.doc_id(lang, g), eng.render(c)) for q, (g, c) in raw.items()}
    qrels = {q: {corpus.doc_id(lang, g): r for g, r in rel.items()} for q, rel in groups.items()}
    return docs, queries, qrels


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
