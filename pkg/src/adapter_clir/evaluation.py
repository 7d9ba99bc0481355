"""Ranking metrics, paired significance tests and condition-grid reports.

Conventions: exponential gain ``2**rel - 1`` with a ``log2(rank + 1)``
discount; unjudged documents are nonrelevant; MAP binarizes at rel >= 1 and
skips queries with no relevant documents, nDCG scores them 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Run = dict[str, list[tuple[str, float]]]
Qrels = dict[str, dict[str, int]]


class ValidationError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def _check_unique(qid: str, ranking) -> None:
    ids = [d for d, _ in ranking]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"query {qid}: a document appears twice in the ranking")


def dcg(gains: list[int], k: int) -> float:
    return sum((2.0**rel - 1.0) / math.log2(i + 2) for i, rel in enumerate(gains[:k]))


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 100) -> tuple[dict[str, float], float]:
    per_query = {}
    for qid in sorted(qrels):
        ranking = run.get(qid, [])
        _check_unique(qid, ranking)
        judged = qrels[qid]
        ideal = dcg(sorted(judged.values(), reverse=True), k)
        if ideal <= 0:
            per_query[qid] = 0.0
            continue
        per_query[qid] = dcg([judged.get(d, 0) for d, _ in ranking], k) / ideal
    values = list(per_query.values())
    return per_query, (float(np.mean(values)) if values else 0.0)


def average_precision(run: Run, qrels: Qrels) -> tuple[dict[str, float], float]:
    per_query = {}
    for qid in sorted(qrels):
        relevant = {d for d, r in qrels[qid].items() if r >= 1}
        if not relevant:
            continue
        ranking = run.get(qid, [])
        _check_unique(qid, ranking)
        hits, acc = 0, 0.0
        for i, (d, _) in enumerate(ranking, start=1):
            if d in relevant:
                hits += 1
                acc += hits / i
        per_query[qid] = acc / len(relevant)
    values = list(per_query.values())
    return per_query, (float(np.mean(values)) if values else 0.0)


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test with n-1 degrees of freedom.

    Zero-variance differences: mean zero gives (0, 1); nonzero mean gives (+-inf, 0).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AlignmentError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise AlignmentError("paired t-test needs at least two pairs")
    diff = a - b
    m = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if m == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, m), 0.0
    t = m / (sd / math.sqrt(n))
    return t, t_two_sided_p(t, n - 1)


def bonferroni(p: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of tests must be >= 1")
    return min(1.0, p * m)


# ---------------------------------------------------------------------------
# TREC files


def write_run(path: str | Path, run: Run, tag: str) -> None:
    with open(path, "w") as f:
        for qid in sorted(run):
            for rank, (doc, score) in enumerate(run[qid], start=1):
                f.write(f"{qid} Q0 {doc} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> Run:
    run: Run = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if len(parts) == 6:
                run.setdefault(parts[0], []).append((parts[2], float(parts[4])))
    return run


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w") as f:
        for qid in sorted(qrels):
            for doc, rel in sorted(qrels[qid].items()):
                f.write(f"{qid} 0 {doc} {rel}\n")


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if len(parts) == 4:
                qrels.setdefault(parts[0], {})[parts[2]] = int(parts[3])
    return qrels


# ---------------------------------------------------------------------------
# reports

DAGGER = "†"  # differs from the full fine-tuning row
CHECK = "‡"  # E-E and E-D differ
ALPHA = 0.05


@dataclass
class Cell:
    value: float
    marks: str = ""


@dataclass
class MetricTable:
    title: str
    languages: list[str]
    rows: dict[tuple[str, str], dict[str, Cell]] = field(default_factory=dict)
    per_query: dict[tuple[str, str], dict[str, dict[str, float]]] = field(default_factory=dict)

    def add_row(self, model: str, condition: str, per_query_by_lang: dict[str, dict[str, float]]) -> None:
        key = (model, condition)
        self.per_query[key] = per_query_by_lang
        cells = {lang: Cell(float(np.mean(list(v.values())))) for lang, v in per_query_by_lang.items()}
        if cells:
            cells["Avg"] = Cell(float(np.mean([cells[l].value for l in self.languages])))
        self.rows[key] = cells

    def columns(self) -> list[str]:
        return self.languages + ["Avg"]

    def _paired(self, a: tuple[str, str], b: tuple[str, str], lang: str) -> float:
        if lang == "Avg":
            qa = [v for l in self.languages for _, v in sorted(self.per_query[a][l].items())]
            qb = [v for l in self.languages for _, v in sorted(self.per_query[b][l].items())]
            return paired_t_test(qa, qb)[1]
        qa = self.per_query[a][lang]
        qb = self.per_query[b][lang]
        keys = sorted(qa)
        if sorted(qb) != keys:
            raise AlignmentError(f"{a} and {b} were evaluated on different queries")
        p = paired_t_test([qa[k] for k in keys], [qb[k] for k in keys])[1]
        return bonferroni(p, len(self.languages))

    def mark_significance(self, baseline: str = "FMFT", pair: tuple[str, str] = ("E-E", "E-D"),
                          alpha: float = ALPHA) -> None:
        """Per model: dagger against the ``baseline`` condition, check between ``pair``.

        Per-language tests are Bonferroni-corrected over the language columns;
        the Avg column pools queries and is not corrected.
        """
        for (model, cond), cells in self.rows.items():
            for col in self.columns():
                marks = ""
                base = (model, baseline)
                if cond != baseline and base in self.rows and self._paired((model, cond), base, col) < alpha:
                    marks += DAGGER
                if cond == pair[1] and (model, pair[0]) in self.rows and self._paired((model, cond), (model, pair[0]), col) < alpha:
                    marks += CHECK
                cells[col].marks = marks


def render_report(tables: list[MetricTable], metric: str = "nDCG@100", alpha: float = ALPHA) -> tuple[str, str]:
    """Fixed-width text and a long-format CSV (table, model, condition, column, value, marks)."""
    out = io.StringIO()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "model", "condition", "column", "value", "marks"])
    for t in tables:
        cols = t.columns() if t.rows else t.languages
        out.write(f"{t.title} ({metric})\n")
        out.write(f"{'Model':<10}{'Condition':<12}" + "".join(f"{c:>12}" for c in cols) + "\n")
        for (model, cond), cells in t.rows.items():
            line = f"{model:<10}{cond:<12}"
            for c in cols:
                cell = cells.get(c)
                line += f"{'' if cell is None else f'{cell.value:.3f}{cell.marks}':>12}"
                if cell is not None:
                    w.writerow([t.title, model, cond, c, repr(cell.value), cell.marks])
            out.write(line + "\n")
        out.write("\n")
    out.write(f"{DAGGER} significantly different from FMFT; {CHECK} E-D differs from E-E "
              f"(paired t-test, Bonferroni over languages, alpha={alpha}; Avg uncorrected)\n")
    return out.getvalue(), buf.getvalue()


def parse_report_csv(text: str) -> dict[tuple[str, str, str, str], float]:
    rows = list(csv.reader(io.StringIO(text)))
    return {(r[0], r[1], r[2], r[3]): float(r[4]) for r in rows[1:]}
