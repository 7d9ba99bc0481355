"""Closed-form parameter accounting for BERT-style encoders and their adapters."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .adapters import LANGUAGE_REDUCTION, TASK_REDUCTION, count_adapter_params
from .retrieval import trainable_fraction  # noqa: F401  (model-level share, re-exported here)


@dataclass(frozen=True)
class ArchConfig:
    name: str
    layers: int
    hidden: int
    ffn_dim: int
    vocab_size: int
    max_positions: int
    type_vocab: int
    has_final_pooler: bool


MBERT = ArchConfig("mBERT", 12, 768, 3072, 119547, 512, 2, True)
XLMR = ArchConfig("XLMR", 12, 768, 3072, 250002, 514, 1, True)
PRESETS = (MBERT, XLMR)


def count_full_model(c: ArchConfig) -> int:
    h, f = c.hidden, c.ffn_dim
    embeddings = (c.vocab_size + c.max_positions + c.type_vocab) * h + 2 * h
    attention = 4 * (h * h + h) + 2 * h
    ffn = h * f + f + f * h + h + 2 * h
    pooler = h * h + h if c.has_final_pooler else 0
    return embeddings + c.layers * (attention + ffn) + pooler


def adapter_percentage(c: ArchConfig, r: int, layers: int | None = None) -> float:
    layers = c.layers if layers is None else layers
    return 100.0 * count_adapter_params(c.hidden, r, layers) / count_full_model(c)


def model_parameter_share(c: ArchConfig, variant: str, r: int = TASK_REDUCTION) -> float:
    """Percent of a full model updated by adapter-mode retrieval training:
    task adapters (twice for DPR's separate sides) plus the pooler(s)."""
    h = c.hidden
    if variant == "dpr":
        trained = 2 * count_adapter_params(h, r, c.layers) + 2 * (h * h + h)
    else:
        trained = count_adapter_params(h, r, c.layers) + h * 128 + 128
    return 100.0 * trained / count_full_model(c)


def size_table_rows(presets=PRESETS) -> list[dict]:
    return [
        {
            "model": c.name,
            "full_model_params": count_full_model(c),
            "full": 100.0,
            "lang_adapter": adapter_percentage(c, LANGUAGE_REDUCTION),
            "task_adapter_r16": adapter_percentage(c, 16),
            "task_adapter_r2": adapter_percentage(c, 2),
            "dpr_trainable": model_parameter_share(c, "dpr"),
            "colbert_trainable": model_parameter_share(c, "colbert"),
        }
        for c in presets
    ]


def render_size_table(rows: list[dict] | None = None) -> tuple[str, str]:
    rows = size_table_rows() if rows is None else rows
    out = io.StringIO()
    out.write(f"{'':<8}{'Full Model':>12}{'Lang. Adapter':>15}{'Task (r=16)':>13}{'Task (r=2)':>12}"
              f"{'DPR train':>11}{'ColBERT train':>15}\n")
    for r in rows:
        out.write(f"{r['model']:<8}{'100%':>12}{r['lang_adapter']:>14.3f}%{r['task_adapter_r16']:>12.3f}%"
                  f"{r['task_adapter_r2']:>11.3f}%{r['dpr_trainable']:>10.3f}%{r['colbert_trainable']:>14.3f}%\n")
    out.write("Task adapters are counted once; DPR trains separate query and document adapters (twice the count).\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
    return out.getvalue(), buf.getvalue()
