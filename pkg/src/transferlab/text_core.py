"""Synthetic two-domain text worlds with rule-derived task labels.

Two domains share sentence structure and function words but use disjoint
content vocabularies. NLI labels follow fixed synonym/antonym/negation
rules, and summaries follow a fixed compression rule, so every generated
label can be re-derived by an independent checker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
NUM_SENTINELS = 32
SENTINELS = tuple(f"<sent_{i}>" for i in range(NUM_SENTINELS))
SPECIALS = (PAD, BOS, EOS, UNK, *SENTINELS)

NLI_LABELS = ("entailment", "neutral", "contradiction")
SUMM_LABELS = ("entailed", "contradictory")
DOMAINS = ("general", "target")
CATEGORIES = ("ATTR", "COND", "LOC", "MOD", "PERSON")

_GENERAL_SYLLABLES = ("ba", "de", "ki", "lo", "mu", "na", "po", "ru", "sa", "tu", "ve", "wi")
_TARGET_SYLLABLES = ("ax", "orn", "ul", "eq", "ix", "och", "ev", "yr", "osk", "unt", "arr", "yx")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    id_of: dict[str, int]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    @property
    def bos_id(self) -> int:
        return self.id_of[BOS]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS]

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK]

    def sentinel_id(self, i: int) -> int:
        return self.id_of[SENTINELS[i]]


def build_vocab(corpora: Sequence[Sequence[str]]) -> Vocab:
    """Specials first (PAD at id 0), then distinct tokens sorted lexicographically."""
    if not corpora:
        raise ValueError("corpora must be nonempty")
    seen: set[str] = set()
    for seq in corpora:
        seen.update(seq)
    ordered = list(SPECIALS) + sorted(seen - set(SPECIALS))
    return Vocab(tokens=tuple(ordered), id_of={t: i for i, t in enumerate(ordered)})


def encode(text: Sequence[str], v: Vocab) -> list[int]:
    unk = v.unk_id
    return [v.id_of.get(t, unk) for t in text]


def decode(ids: Sequence[int], v: Vocab) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= i < len(v.tokens):
            raise ValueError(f"id {i} out of range for vocab of size {len(v.tokens)}")
        out.append(v.tokens[i])
    return out


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class Template:
    kind: str
    tokens: tuple[str, ...]

    def slots(self) -> list[str]:
        return [t[1:-1] for t in self.tokens if t.startswith("{") and t.endswith("}")]


@dataclass
class NliExample:
    premise: list[str]
    hypothesis: list[str]
    label: str

    def __post_init__(self):
        if self.label not in NLI_LABELS:
            raise ValueError(f"bad NLI label {self.label!r}")


@dataclass
class SummExample:
    document: list[str]
    summary: list[str]
    veracity: str = "entailed"
    source_id: int | None = None

    def __post_init__(self):
        if self.veracity not in SUMM_LABELS:
            raise ValueError(f"bad veracity {self.veracity!r}")


@dataclass(frozen=True)
class EntitySpan:
    start: int
    length: int
    category: str


@dataclass
class WorldParams:
    synonym_classes: int = 6
    members_per_class: int = 3
    persons: int = 4
    locations: int = 4
    modifiers: int = 3

    def __post_init__(self):
        if self.synonym_classes < 2:
            raise ValueError("need at least 2 synonym classes per domain")
        if self.members_per_class < 2:
            raise ValueError("need at least 2 members per synonym class")
        if min(self.persons, self.locations, self.modifiers) < 2:
            raise ValueError("need at least 2 entities per gazetteer category")


_TEMPLATES = (
    # fixed-length statements: polarity flips one word, positions stay put
    Template("statement_pos", ("there", "is", "a", "{COND}")),
    Template("statement_neg", ("there", "is", "no", "{COND}")),
    Template("attr_fact", ("{COND}", "is", "seen", "with", "{ATTR}")),
    Template("either_or", ("either", "{COND}", "or", "{COND}")),
    Template("doc_first", ("the", "{LOC}", "shows", "{MOD}", "{COND}")),
    Template("doc_second", ("{PERSON}", "notes", "{MOD}", "{COND}", "in", "the", "{LOC}")),
)


@dataclass
class SyntheticWorldSpec:
    seed: int
    synonyms: dict[str, frozenset[str]]
    antonyms: dict[str, str]
    gazetteer: dict[str, dict[str, frozenset[str]]]  # domain -> category -> entity tokens
    sentence_templates: tuple[Template, ...]
    classes: dict[str, tuple[tuple[str, ...], ...]]  # domain -> ordered member tuples
    class_attr: dict[str, str]  # condition token -> its attribute collocate

    def function_words(self) -> frozenset[str]:
        words = set()
        for tpl in self.sentence_templates:
            words.update(t for t in tpl.tokens if not t.startswith("{"))
        words.add(".")
        return frozenset(words)

    def content_tokens(self, domain: str) -> frozenset[str]:
        toks: set[str] = set()
        for cat_map in (self.gazetteer[domain],):
            for entities in cat_map.values():
                toks.update(entities)
        return frozenset(toks)

    def class_index(self, domain: str, token: str) -> int | None:
        for idx, members in enumerate(self.classes[domain]):
            if token in members:
                return idx
        return None

    def antonym_class(self, domain: str, idx: int) -> int | None:
        paired = idx + 1 if idx % 2 == 0 else idx - 1
        if paired < len(self.classes[domain]):
            return paired
        return None

    def validate(self) -> None:
        shared = self.content_tokens("general") & self.content_tokens("target")
        if shared:
            raise ValueError(f"domain content vocabularies intersect: {sorted(shared)[:5]}")
        for tpl in self.sentence_templates:
            for slot in tpl.slots():
                if slot not in CATEGORIES:
                    raise ValueError(f"template slot {slot!r} names no known category")
        for a, b in self.antonyms.items():
            if self.antonyms.get(b) != a:
                raise ValueError(f"antonym relation not symmetric at {a!r}")


def _make_words(rng: np.random.Generator, syllables: tuple[str, ...], count: int) -> list[str]:
    combos = [a + b for a in syllables for b in syllables if a != b]
    if count > len(combos):
        raise ValueError(f"insufficient vocabulary budget: need {count}, can mint {len(combos)}")
    order = rng.permutation(len(combos))
    return [combos[i] for i in order[:count]]


def gen_world(seed: int, params: WorldParams | None = None) -> SyntheticWorldSpec:
    """Deterministically synthesize both domains of a world."""
    params = params or WorldParams()
    synonyms: dict[str, frozenset[str]] = {}
    antonyms: dict[str, str] = {}
    gazetteer: dict[str, dict[str, frozenset[str]]] = {}
    classes: dict[str, tuple[tuple[str, ...], ...]] = {}
    class_attr: dict[str, str] = {}

    for d_idx, (domain, syllables) in enumerate(zip(DOMAINS, (_GENERAL_SYLLABLES, _TARGET_SYLLABLES))):
        rng = np.random.default_rng(np.random.SeedSequence([seed, d_idx]))
        need = (
            params.synonym_classes * params.members_per_class
            + params.synonym_classes
            + params.persons
            + params.locations
            + params.modifiers
        )
        words = _make_words(rng, syllables, need)
        pos = 0

        def take(n: int) -> list[str]:
            nonlocal pos
            chunk = words[pos : pos + n]
            pos += n
            return chunk

        member_lists = tuple(tuple(take(params.members_per_class)) for _ in range(params.synonym_classes))
        attrs = take(params.synonym_classes)
        persons = take(params.persons)
        locations = take(params.locations)
        modifiers = take(params.modifiers)

        classes[domain] = member_lists
        for members, attr in zip(member_lists, attrs):
            for m in members:
                synonyms[m] = frozenset(set(members) - {m})
                class_attr[m] = attr
        # classes are antonym-paired (0,1), (2,3), ...; members pair by index
        for i in range(0, params.synonym_classes - 1, 2):
            for a, b in zip(member_lists[i], member_lists[i + 1]):
                antonyms[a] = b
                antonyms[b] = a
        gazetteer[domain] = {
            "ATTR": frozenset(attrs),
            "COND": frozenset(m for members in member_lists for m in members),
            "LOC": frozenset(locations),
            "MOD": frozenset(modifiers),
            "PERSON": frozenset(persons),
        }

    world = SyntheticWorldSpec(
        seed=seed,
        synonyms=synonyms,
        antonyms=antonyms,
        gazetteer=gazetteer,
        sentence_templates=_TEMPLATES,
        classes=classes,
        class_attr=class_attr,
    )
    world.validate()
    return world


def statement(member: str, positive: bool) -> list[str]:
    return ["there", "is", "a" if positive else "no", member]


def parse_statement(tokens: Sequence[str]) -> tuple[str, bool] | None:
    """Recover (condition token, polarity) from a statement sentence, else None."""
    toks = list(tokens)
    if len(toks) == 4 and toks[:2] == ["there", "is"] and toks[2] in ("a", "no"):
        return toks[3], toks[2] == "a"
    return None


def check_nli_label(world: SyntheticWorldSpec, domain: str, premise: Sequence[str], hypothesis: Sequence[str]) -> str | None:
    """Independent rule-checker: derive the gold label from world tables."""
    p = parse_statement(premise)
    h = parse_statement(hypothesis)
    if p is None or h is None:
        return None
    (pt, ppol), (ht, hpol) = p, h
    pi = world.class_index(domain, pt)
    hi = world.class_index(domain, ht)
    if pi is None or hi is None:
        return None
    if pi == hi:
        return "entailment" if ppol == hpol else "contradiction"
    if world.antonym_class(domain, pi) == hi:
        return "contradiction" if ppol == hpol else "entailment"
    return "neutral"


def _balanced_labels(n: int, labels: Sequence[str]) -> list[str]:
    counts = [n // len(labels)] * len(labels)
    for i in range(n % len(labels)):
        counts[i] += 1
    out: list[str] = []
    for lab, c in zip(labels, counts):
        out.extend([lab] * c)
    return out


def gen_nli_data(world: SyntheticWorldSpec, domain: str, n: int, seed: int) -> list[NliExample]:
    """Balanced NLI examples whose labels are correct by construction."""
    if n < 3:
        raise ValueError("need n >= 3 for a balanced NLI sample")
    members = world.classes[domain]
    k = len(members)
    unrelated_exists = any(
        j not in (i, world.antonym_class(domain, i)) for i in range(k) for j in range(k)
    )
    if not unrelated_exists:
        raise ValueError("world too small to generate neutral examples")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 1]))
    labels = _balanced_labels(n, NLI_LABELS)
    rng.shuffle(labels)
    out: list[NliExample] = []
    for label in labels:
        ci = int(rng.integers(k))
        mem = members[ci]
        t = mem[int(rng.integers(len(mem)))]
        pol = bool(rng.integers(2))
        premise = statement(t, pol)
        if label == "entailment":
            others = [m for m in mem if m != t]
            s = others[int(rng.integers(len(others)))]
            hypothesis = statement(s, pol)
        elif label == "contradiction":
            anti = world.antonym_class(domain, ci)
            if anti is not None and rng.integers(2) == 0:
                amem = members[anti]
                s = amem[int(rng.integers(len(amem)))]
                hypothesis = statement(s, pol)
            else:
                s = mem[int(rng.integers(len(mem)))]
                hypothesis = statement(s, not pol)
        else:
            banned = {ci, world.antonym_class(domain, ci)}
            options = [j for j in range(k) if j not in banned]
            cj = options[int(rng.integers(len(options)))]
            omem = members[cj]
            s = omem[int(rng.integers(len(omem)))]
            hypothesis = statement(s, pol)
        out.append(NliExample(premise=premise, hypothesis=hypothesis, label=label))
    return out


def _fill(rng: np.random.Generator, world: SyntheticWorldSpec, domain: str, template: Template) -> list[str]:
    gaz = world.gazetteer[domain]
    out = []
    for tok in template.tokens:
        if tok.startswith("{"):
            cat = tok[1:-1]
            pool = sorted(gaz[cat])
            out.append(pool[int(rng.integers(len(pool)))])
        else:
            out.append(tok)
    return out


def compress_first_sentence(world: SyntheticWorldSpec, domain: str, document: Sequence[str]) -> list[str]:
    """Summary rule: first sentence of the document with modifier tokens dropped."""
    mods = world.gazetteer[domain]["MOD"]
    first: list[str] = []
    for tok in document:
        if tok == ".":
            break
        first.append(tok)
    return [t for t in first if t not in mods]


def gen_summ_data(world: SyntheticWorldSpec, domain: str, n: int, seed: int) -> list[SummExample]:
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 2]))
    first_tpl = next(t for t in world.sentence_templates if t.kind == "doc_first")
    second_tpl = next(t for t in world.sentence_templates if t.kind == "doc_second")
    out: list[SummExample] = []
    for _ in range(n):
        doc = _fill(rng, world, domain, first_tpl) + ["."]
        if rng.integers(2):
            doc += _fill(rng, world, domain, second_tpl) + ["."]
        out.append(SummExample(document=doc, summary=compress_first_sentence(world, domain, doc)))
    return out


def gen_raw_corpus(world: SyntheticWorldSpec, domain: str, n: int, seed: int) -> list[list[str]]:
    """Unlabelled in-domain sentences for masked-token pretraining."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 3]))
    members = world.classes[domain]
    k = len(members)
    out: list[list[str]] = []
    for _ in range(n):
        kind = rng.random()
        ci = int(rng.integers(k))
        mem = members[ci]
        t = mem[int(rng.integers(len(mem)))]
        if kind < 0.30:
            out.append(statement(t, bool(rng.integers(2))))
        elif kind < 0.55:
            out.append([t, "is", "seen", "with", world.class_attr[t]])
        elif kind < 0.70:
            anti = world.antonym_class(domain, ci)
            if anti is None:
                out.append(statement(t, True))
            else:
                partner = members[anti][int(rng.integers(len(members[anti])))]
                out.append(["either", t, "or", partner])
        else:
            tpl_kind = "doc_first" if rng.integers(2) else "doc_second"
            tpl = next(x for x in world.sentence_templates if x.kind == tpl_kind)
            out.append(_fill(rng, world, domain, tpl))
    return out


def gen_sts_data(world: SyntheticWorldSpec, domain: str, n: int, seed: int) -> list[tuple[list[str], list[str], float]]:
    """Sentence pairs with rule-assigned similarity: paraphrase 1.0,
    related-but-opposed 0.5, unrelated 0.0."""
    if n < 3:
        raise ValueError("need n >= 3 for all three similarity levels")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 4]))
    members = world.classes[domain]
    k = len(members)
    levels = _balanced_labels(n, ("high", "mid", "low"))
    rng.shuffle(levels)
    out: list[tuple[list[str], list[str], float]] = []
    for level in levels:
        ci = int(rng.integers(k))
        mem = members[ci]
        t = mem[int(rng.integers(len(mem)))]
        pol = bool(rng.integers(2))
        s1 = statement(t, pol)
        if level == "high":
            others = [m for m in mem if m != t]
            s2 = statement(others[int(rng.integers(len(others)))], pol)
            score = 1.0
        elif level == "mid":
            s2 = statement(mem[int(rng.integers(len(mem)))], not pol)
            score = 0.5
        else:
            banned = {ci, world.antonym_class(domain, ci)}
            options = [j for j in range(k) if j not in banned]
            cj = options[int(rng.integers(len(options)))]
            omem = members[cj]
            s2 = statement(omem[int(rng.integers(len(omem)))], pol)
            score = 0.0
        out.append((s1, s2, score))
    return out


def find_entities(tokens: Sequence[str], gazetteer: dict[str, frozenset[str]]) -> list[EntitySpan]:
    """Longest-match gazetteer lookup, left to right, non-overlapping."""
    toks = list(tokens)
    spans: list[EntitySpan] = []
    i = 0
    while i < len(toks):
        best: EntitySpan | None = None
        for cat in sorted(gazetteer):
            entities = gazetteer[cat]
            if toks[i] not in entities:
                continue
            length = 1
            while i + length < len(toks) and toks[i + length] in entities:
                length += 1
            if best is None or length > best.length:
                best = EntitySpan(start=i, length=length, category=cat)
        if best is None:
            i += 1
        else:
            spans.append(best)
            i = best.start + best.length
    return spans


# ---------------------------------------------------------------------------
# Serialization: JSONL datasets and the world JSON document.

def dataset_record(task: str, domain: str, x1: Sequence[str], x2: Sequence[str] | None, label: str | None, **extra) -> dict:
    rec = {
        "task": task,
        "domain": domain,
        "x1": detokenize(x1),
        "x2": detokenize(x2) if x2 is not None else None,
        "label": label,
    }
    rec.update(extra)
    return rec


def nli_to_records(examples: Iterable[NliExample], domain: str) -> list[dict]:
    return [dataset_record("nli", domain, e.premise, e.hypothesis, e.label) for e in examples]


def summ_to_records(examples: Iterable[SummExample], domain: str) -> list[dict]:
    return [dataset_record("summ", domain, e.document, e.summary, e.veracity) for e in examples]


def raw_to_records(corpus: Iterable[Sequence[str]], domain: str) -> list[dict]:
    return [dataset_record("raw", domain, seq, None, None) for seq in corpus]


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def records_to_nli(records: Iterable[dict]) -> list[NliExample]:
    return [
        NliExample(premise=tokenize(r["x1"]), hypothesis=tokenize(r["x2"]), label=r["label"])
        for r in records
        if r["task"] == "nli"
    ]


def records_to_summ(records: Iterable[dict]) -> list[SummExample]:
    return [
        SummExample(document=tokenize(r["x1"]), summary=tokenize(r["x2"]), veracity=r["label"])
        for r in records
        if r["task"] == "summ"
    ]


def records_to_raw(records: Iterable[dict]) -> list[list[str]]:
    return [tokenize(r["x1"]) for r in records if r["task"] == "raw"]


def world_to_json(world: SyntheticWorldSpec) -> str:
    doc = {
        "seed": world.seed,
        "synonyms": {k: sorted(v) for k, v in sorted(world.synonyms.items())},
        "antonyms": dict(sorted(world.antonyms.items())),
        "gazetteer": {
            d: {c: sorted(e) for c, e in sorted(cats.items())} for d, cats in sorted(world.gazetteer.items())
        },
        "sentence_templates": [{"kind": t.kind, "tokens": list(t.tokens)} for t in world.sentence_templates],
        "classes": {d: [list(m) for m in members] for d, members in sorted(world.classes.items())},
        "class_attr": dict(sorted(world.class_attr.items())),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def world_from_json(text: str) -> SyntheticWorldSpec:
    doc = json.loads(text)
    world = SyntheticWorldSpec(
        seed=doc["seed"],
        synonyms={k: frozenset(v) for k, v in doc["synonyms"].items()},
        antonyms=dict(doc["antonyms"]),
        gazetteer={d: {c: frozenset(e) for c, e in cats.items()} for d, cats in doc["gazetteer"].items()},
        sentence_templates=tuple(Template(kind=t["kind"], tokens=tuple(t["tokens"])) for t in doc["sentence_templates"]),
        classes={d: tuple(tuple(m) for m in members) for d, members in doc["classes"].items()},
        class_attr=dict(doc["class_attr"]),
    )
    world.validate()
    return world


def world_token_inventory(world: SyntheticWorldSpec) -> list[list[str]]:
    """Token sequences covering every surface form the world can emit."""
    seqs = [sorted(world.function_words())]
    for domain in DOMAINS:
        seqs.append(sorted(world.content_tokens(domain)))
    return seqs
