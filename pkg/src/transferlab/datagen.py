"""Model- and rule-driven data manufacture.

Three procedures: counterfactual summaries by same-category entity swap,
pseudo NLI triples via control-coded generation, and contrastive
positive/negative pairs via beam search. Every generated item carries the
id of its source, and degenerate generations are reported, never imputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as tm
from .objectives import NLI_CLASS_TO_CODE, TaskExample, format_prompt
from .text_core import (
    NLI_LABELS,
    EntitySpan,
    NliExample,
    SummExample,
    Vocab,
    decode,
    detokenize,
    encode,
    find_entities,
    tokenize,
)


@dataclass
class GenConfig:
    beam: int = 5
    k_pairs: int = 3
    max_len: int = 16

    def __post_init__(self):
        if not 1 <= self.k_pairs <= self.beam:
            raise ValueError("need 1 <= k_pairs <= beam")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")


@dataclass
class GeneratedNli(NliExample):
    source_id: int = -1
    control_code: str = ""


@dataclass
class ContrastiveSet:
    anchor: list[str]
    positives: list[list[str]]
    negatives: list[list[str]]
    source_id: int = -1


@dataclass
class GenReport:
    produced: int = 0
    dropped: int = 0
    padded: int = 0

    def to_json(self) -> str:
        return json.dumps({"produced": self.produced, "dropped": self.dropped, "padded": self.padded})


def counterfactual_summary(
    doc: Sequence[str],
    summary: Sequence[str],
    gazetteer: dict[str, frozenset[str]],
    corpus_entities: dict[str, set[str]],
    rng_seed: int,
) -> SummExample | None:
    """Swap one entity span of the summary for a same-category corpus entity.

    Returns None when the summary holds no entity, when the sampled
    category has no alternative entity, or when the swapped text would
    contain "UNK" or a "#" token.
    """
    spans = find_entities(summary, gazetteer)
    if not spans:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 23]))
    span: EntitySpan = spans[int(rng.integers(len(spans)))]
    original = set(summary[span.start : span.start + span.length])
    pool = sorted(set(corpus_entities.get(span.category, set())) - original)
    if not pool:
        return None
    replacement = pool[int(rng.integers(len(pool)))]
    swapped = list(summary[: span.start]) + [replacement] + list(summary[span.start + span.length :])
    if any(t == "UNK" or "#" in t for t in swapped):
        return None
    return SummExample(document=list(doc), summary=swapped, veracity="contradictory")


def build_summ_nlu_set(
    gold_pairs: Sequence[SummExample],
    gazetteer: dict[str, frozenset[str]],
    corpus_entities: dict[str, set[str]],
    seed: int,
) -> list[SummExample]:
    """Entailed gold pairs plus one contradictory twin per swappable pair."""
    if not gold_pairs:
        raise ValueError("gold_pairs must be nonempty")
    out: list[SummExample] = []
    for i, pair in enumerate(gold_pairs):
        out.append(SummExample(document=list(pair.document), summary=list(pair.summary), veracity="entailed", source_id=i))
        twin = counterfactual_summary(pair.document, pair.summary, gazetteer, corpus_entities, rng_seed=seed * 9973 + i)
        if twin is not None:
            twin.source_id = i
            out.append(twin)
    return out


def corpus_entity_index(corpora: Sequence[Sequence[str]], gazetteer: dict[str, frozenset[str]]) -> dict[str, set[str]]:
    """Entities per category actually observed in the given token sequences."""
    index: dict[str, set[str]] = {cat: set() for cat in gazetteer}
    for seq in corpora:
        for span in find_entities(seq, gazetteer):
            for tok in seq[span.start : span.start + span.length]:
                index[span.category].add(tok)
    return index


def _strip_specials(tokens: list[str]) -> list[str]:
    return [t for t in tokens if not (t.startswith("<") and t.endswith(">"))]


def pseudo_nli(
    model: tm.Seq2SeqModel,
    premises: Sequence[Sequence[str]],
    cfg: GenConfig,
    vocab: Vocab,
) -> tuple[list[GeneratedNli], GenReport]:
    """One generated hypothesis per premise per label, via greedy decoding."""
    if not premises:
        raise ValueError("premises must be nonempty")
    report = GenReport()
    out: list[GeneratedNli] = []
    for i, premise in enumerate(premises):
        for label in NLI_LABELS:
            code = NLI_CLASS_TO_CODE[label]
            ex = TaskExample(task="NLI", direction="NLG", x1=list(premise), x2=["_"], label=code)
            prompt, _ = format_prompt(ex)
            src_ids = encode(tokenize(prompt), vocab)
            gen = tm.greedy_decode(model, src_ids, cfg.max_len)
            hypothesis = _strip_specials(decode(gen, vocab))
            if not hypothesis:
                report.dropped += 1
                continue
            report.produced += 1
            out.append(
                GeneratedNli(
                    premise=list(premise),
                    hypothesis=hypothesis,
                    label=label,
                    source_id=i,
                    control_code=code,
                )
            )
    return out, report


def contrastive_pairs(
    model: tm.Seq2SeqModel,
    anchors: Sequence[Sequence[str]],
    cfg: GenConfig,
    vocab: Vocab,
) -> tuple[list[ContrastiveSet], GenReport]:
    """Top-k beam generations under entailed / contradictory control codes."""
    if not anchors:
        raise ValueError("anchors must be nonempty")
    report = GenReport()
    sets: list[ContrastiveSet] = []
    for i, anchor in enumerate(anchors):
        anchor = list(anchor)
        sides: dict[str, list[list[str]]] = {}
        for code in ("entailed", "contradictory"):
            ex = TaskExample(task="NLI", direction="NLG", x1=anchor, x2=["_"], label=code)
            prompt, _ = format_prompt(ex)
            src_ids = encode(tokenize(prompt), vocab)
            scored = tm.beam_search(model, src_ids, beam=cfg.beam, k=cfg.beam, max_len=cfg.max_len)
            candidates = []
            for seq, _score in scored:
                toks = _strip_specials(decode(seq, vocab))
                if toks and toks != anchor:
                    candidates.append(toks)
            if not candidates:  # degenerate beam: fall back to raw outputs
                candidates = [_strip_specials(decode(seq, vocab)) or ["<unk>"] for seq, _ in scored]
            picked = []
            for j in range(cfg.k_pairs):
                if j < len(candidates):
                    picked.append(candidates[j])
                else:
                    picked.append(candidates[j % len(candidates)])
                    report.padded += 1
            sides[code] = picked
            report.produced += len(picked)
        sets.append(
            ContrastiveSet(anchor=anchor, positives=sides["entailed"], negatives=sides["contradictory"], source_id=i)
        )
    return sets, report


def generated_nli_records(examples: Sequence[GeneratedNli], domain: str) -> list[dict]:
    return [
        {
            "task": "nli",
            "domain": domain,
            "x1": detokenize(e.premise),
            "x2": detokenize(e.hypothesis),
            "label": e.label,
            "source_id": e.source_id,
            "control_code": e.control_code,
        }
        for e in examples
    ]


def summ_nlu_records(examples: Sequence[SummExample], domain: str) -> list[dict]:
    recs = []
    for e in examples:
        rec = {
            "task": "summ",
            "domain": domain,
            "x1": detokenize(e.document),
            "x2": detokenize(e.summary),
            "label": e.veracity,
        }
        if e.source_id is not None:
            rec["source_id"] = e.source_id
            rec["control_code"] = e.veracity
        recs.append(rec)
    return recs
