"""Classification, lexical-overlap, entity, retrieval, and correlation metrics.

All scores live in [0, 1] (correlations in [-1, 1]); display scaling is the
caller's business. Every function is pure.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .text_core import find_entities


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    metadata: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "metadata": self.metadata}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        doc = json.loads(text)
        return MetricsReport(metrics=doc["metrics"], metadata=doc.get("metadata", {}))


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    """One row per (model, dataset, metric)."""
    lines = ["model,dataset,metric,value"]
    for rep in reports:
        model_id = rep.metadata.get("model_id", "")
        dataset_id = rep.metadata.get("dataset_id", "")
        for metric in sorted(rep.metrics):
            lines.append(f"{model_id},{dataset_id},{metric},{rep.metrics[metric]}")
    return "\n".join(lines) + "\n"


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds) or not golds:
        raise ValueError("preds and golds must be nonempty and equal-length")
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def macro_f1(preds: Sequence[str], golds: Sequence[str], classes: Sequence[str]) -> float:
    """Unweighted mean of per-class F1; empty classes contribute 0."""
    if len(preds) != len(golds) or not golds:
        raise ValueError("preds and golds must be nonempty and equal-length")
    if not classes:
        raise ValueError("classes must be nonempty")
    total = 0.0
    for c in classes:
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if p != c and g == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        total += 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return total / len(classes)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Geometric mean of modified 1..4-gram precisions with brevity penalty.

    A zero match count for any order is floored at 1 / (2 * |candidate|)
    before dividing by the n-gram count, which keeps the geometric mean
    finite and reproducible.
    """
    if not candidate or not references or not any(references):
        raise ValueError("candidate and at least one reference must be nonempty")
    c = len(candidate)
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for gram, cnt in _ngrams(ref, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        matched = sum(min(cnt, max_ref[gram]) for gram, cnt in cand_counts.items())
        denom = max(1, c - n + 1)
        numer = matched if matched > 0 else 1.0 / (2.0 * c)
        log_sum += math.log(numer / denom)
    geo = math.exp(log_sum / 4.0)
    ref_lens = sorted((abs(len(r) - c), len(r)) for r in references)
    r = ref_lens[0][1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * geo


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        for j in range(1, n + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[n]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not candidate or not reference:
        raise ValueError("candidate and reference must be nonempty")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def _entity_set(tokens: Sequence[str], gazetteer: dict[str, frozenset[str]]) -> set[tuple[str, tuple[str, ...]]]:
    spans = find_entities(tokens, gazetteer)
    return {(s.category, tuple(tokens[s.start : s.start + s.length])) for s in spans}


def nem(candidate: Sequence[str], reference: Sequence[str], gazetteer: dict[str, frozenset[str]]) -> float:
    """Fraction of reference entities recovered in the candidate."""
    ref_entities = _entity_set(reference, gazetteer)
    cand_entities = _entity_set(candidate, gazetteer)
    if not ref_entities:
        return 1.0 if not cand_entities else 0.0
    return len(cand_entities & ref_entities) / len(ref_entities)


def acc_at_k(
    query_vecs: np.ndarray, candidate_vecs: np.ndarray, gold_index_per_query: Sequence[int], k: int
) -> float:
    queries = np.asarray(query_vecs, dtype=np.float64)
    cands = np.asarray(candidate_vecs, dtype=np.float64)
    golds = list(gold_index_per_query)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(cands):
        raise ValueError(f"k={k} exceeds the {len(cands)} candidates")
    if any(not 0 <= g < len(cands) for g in golds):
        raise ValueError("gold index out of range")
    qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    cn = cands / np.linalg.norm(cands, axis=1, keepdims=True)
    sims = qn @ cn.T
    hits = 0
    for qi, gold in enumerate(golds):
        order = sorted(range(len(cands)), key=lambda j: (-sims[qi, j], j))
        if gold in order[:k]:
            hits += 1
    return hits / len(golds)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        raise ValueError("zero variance input")
    return float((xc * yc).sum()) / denom


def fractional_ranks(xs: Sequence[float]) -> np.ndarray:
    """Ranks 1..n with ties receiving the mean of their positions."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = mean_rank
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    rx = fractional_ranks(xs)
    ry = fractional_ranks(ys)
    try:
        return pearson(rx, ry)
    except ValueError as exc:
        raise ValueError("all-tied input: Spearman undefined") from exc


def zero_rule(golds_train: Sequence[str], golds_test: Sequence[str]) -> tuple[list[str], MetricsReport]:
    """Predict the modal training class everywhere; ties break lexicographically."""
    if not golds_train:
        raise ValueError("golds_train must be nonempty")
    counts = Counter(golds_train)
    top = max(counts.values())
    modal = min(c for c, n in counts.items() if n == top)
    preds = [modal] * len(golds_test)
    classes = sorted(set(golds_train) | set(golds_test))
    report = MetricsReport(
        metrics={
            "accuracy": accuracy(preds, golds_test),
            "macro_f1": macro_f1(preds, golds_test, classes),
        },
        metadata={"model_id": "zero-rule", "modal_class": modal},
    )
    return preds, report
