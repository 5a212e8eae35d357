"""Tail-prediction questions, candidate ranking, MRR / Hits@k and explanations."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kg_store import Quadruple, TimeScope, Tkg
from .scoring import BundleSource, Model, sample_negatives, score_forward
from .sentences import StructuredSentence


@dataclass
class Question:
    subject: int
    relation: int
    time: TimeScope
    truth: int
    candidates: list[int]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("question has no candidates")
        if self.candidates.count(self.truth) != 1:
            raise ValueError("candidates must contain the truth exactly once")

    def quad(self, candidate: int) -> Quadruple:
        return Quadruple(self.subject, self.relation, candidate, self.time)


@dataclass
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    num_queries: int
    ranks: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3,
                "num_queries": self.num_queries}


@dataclass
class Explanation:
    sentence: StructuredSentence
    weight: float
    p: float
    text: str

    @property
    def summand(self) -> float:
        return self.weight * self.p


# -- candidates ------------------------------------------------------------------------------

def make_question(tkg: Tkg, q: Quadruple, mode: str, rng: np.random.Generator,
                  known: Sequence[Tkg] = (), num: int = 50) -> Question:
    """Candidate set for tail prediction of ``q``.

    ``validation50``: ``num`` tail corruptions from the 3-hop neighbourhood
    sampler, plus the truth.  ``all``: every entity.  ``random``: the truth plus
    ``num - 1`` distinct entities drawn uniformly.
    """
    q = Quadruple(*q)
    if mode == "all":
        cands = list(range(tkg.num_entities))
    elif mode == "validation50":
        negs = sample_negatives(tkg, q, num, rng, known=known, sides="tail")
        cands = [q.object] + sorted({n.object for n in negs} - {q.object})
    elif mode == "random":
        others = np.array([e for e in range(tkg.num_entities) if e != q.object])
        k = min(num - 1, len(others))
        cands = [q.object] + sorted(int(e) for e in rng.choice(others, size=k, replace=False))
    else:
        raise ValueError(f"unknown candidate mode {mode!r}")
    return Question(q.subject, q.relation, q.time, q.object, cands)


def filter_question(q: Question, graphs: Sequence[Tkg]) -> Question:
    """Drop candidates (other than the truth) that form a known true fact."""
    keep = [c for c in q.candidates
            if c == q.truth or not any(g.edge_id(q.quad(c)) is not None for g in graphs)]
    return Question(q.subject, q.relation, q.time, q.truth, keep)


# -- scoring and ranking ----------------------------------------------------------------------

def score_question(model: Model, tkg: Tkg, q: Question,
                   source: BundleSource | None = None, chunk: int = 64) -> list[tuple[int, float]]:
    source = source or BundleSource(tkg, model)
    out = []
    for a in range(0, len(q.candidates), chunk):
        cands = q.candidates[a:a + chunk]
        f, _ = score_forward(model, tkg, [source.get(q.quad(c)) for c in cands])
        out += [(c, float(v)) for c, v in zip(cands, f)]
    return out


def rank_of(scored: Sequence[tuple[int, float]], truth: int) -> float:
    """Mean-rank of ``truth`` under descending score (ties share the average position)."""
    found = [f for c, f in scored if c == truth]
    if len(found) != 1:
        raise ValueError("scored candidates must contain the truth exactly once")
    ft = found[0]
    higher = sum(1 for c, f in scored if f > ft)
    tied = sum(1 for c, f in scored if f == ft)
    return higher + (tied + 1) / 2.0


def rank_and_metrics(results: Sequence[tuple[Sequence[tuple[int, float]], int]]) -> Metrics:
    """``results`` holds one (scored candidates, truth) pair per query."""
    ranks = [rank_of(scored, truth) for scored, truth in results]
    if not ranks:
        return Metrics(0.0, 0.0, 0.0, 0, [])
    r = np.asarray(ranks)
    return Metrics(float(np.mean(1.0 / r)), float(np.mean(r <= 1)), float(np.mean(r <= 3)),
                   len(ranks), ranks)


def evaluate(model: Model, tkg: Tkg, questions: Sequence[Question],
             source: BundleSource | None = None):
    """Score every question; returns metrics and per-query rows for the CSV report."""
    source = source or BundleSource(tkg, model)
    results, rows = [], []
    for i, q in enumerate(questions):
        scored = score_question(model, tkg, q, source)
        results.append((scored, q.truth))
        best = max(scored, key=lambda cf: cf[1])[0]
        rows.append({"query_id": i, "rank": rank_of(scored, q.truth),
                     "truth": tkg.entities[q.truth], "top1": tkg.entities[best]})
    return rank_and_metrics(results), rows


def metrics_json(m: Metrics, label: str = "raw") -> str:
    return json.dumps({**m.to_json(), "setting": label}, indent=2, sort_keys=True) + "\n"


def ranks_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["query_id", "rank", "truth", "top1"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# -- explanations --------------------------------------------------------------------------------

def render(sentence: StructuredSentence) -> str:
    parts = [" ".join(seg) for seg in sentence.segments if seg]
    return " | ".join(parts)


def explain_from_scores(sentences: Sequence[StructuredSentence], ps: Sequence[float],
                        weights: Sequence[float]) -> Explanation:
    summands = np.asarray(weights) * np.asarray(ps)
    k = int(np.argmax(summands))
    return Explanation(sentences[k], float(weights[k]), float(ps[k]), render(sentences[k]))


def explain(model: Model, tkg: Tkg, q: Question, answer: int,
            source: BundleSource | None = None) -> Explanation:
    """The sentence contributing the largest weight * p term to ``answer``'s score."""
    source = source or BundleSource(tkg, model)
    prep = source.get(q.quad(answer))
    _, cache = score_forward(model, tkg, [prep])
    return explain_from_scores(prep.bundle.sentences, cache["p"], cache["weights"])
