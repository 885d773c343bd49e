"""From raw data to a scalar loss: masking, prompts, batch mixing, composition.

The joint objective is ``l_joint = lambda * l_mlm + (1 - lambda) * l_task``
with ``l_task = gamma * l_nlu + l_nlg``. Prompt strings are fixed templates
and must never drift: tests pin them against golden files byte-for-byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import model as tm
from .autodiff import Tensor
from .text_core import Vocab, detokenize, encode, tokenize

TASKS = ("NLI", "SUMM")
DIRECTIONS = ("NLU", "NLG")

NLI_CLASS_TO_CODE = {"entailment": "entailed", "neutral": "neutral", "contradiction": "contradictory"}
NLI_CODE_TO_CLASS = {v: k for k, v in NLI_CLASS_TO_CODE.items()}
NLI_ANSWERS = {"entailment": "True", "contradiction": "False", "neutral": "Neither"}
SUMM_ANSWERS = {"entailed": "True", "contradictory": "False"}
NLI_CODES = ("entailed", "neutral", "contradictory")
SUMM_CODES = ("entailed", "contradictory")


@dataclass
class TaskExample:
    task: str  # NLI | SUMM
    direction: str  # NLU | NLG
    x1: list[str]  # premise or document
    x2: list[str]  # hypothesis or summary
    label: str  # control-code form: entailed / neutral / contradictory

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"bad task {self.task!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {self.direction!r}")
        codes = NLI_CODES if self.task == "NLI" else SUMM_CODES
        if self.label not in codes:
            raise ValueError(f"label {self.label!r} invalid for task {self.task}")
        if not self.x1 or not self.x2:
            raise ValueError("x1 and x2 must both be present")


@dataclass
class LossWeights:
    lambda_: float = 0.5
    gamma: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")


@dataclass
class MlmConfig:
    mask_rate: float = 0.15
    min_masks: int = 1

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if self.min_masks < 1:
            raise ValueError("min_masks must be >= 1")


@dataclass
class MixerConfig:
    domain_task_ratio: float = 1.0  # in-domain MLM : general task
    nli_summ_ratio: float = 1.0

    def __post_init__(self):
        if self.domain_task_ratio <= 0 or self.nli_summ_ratio <= 0:
            raise ValueError("mixer ratios must be positive")


@dataclass
class LossBreakdown:
    l_mlm: float
    l_nlu: float
    l_nlg: float
    l_task: float
    l_joint: float
    node: Tensor | None = field(default=None, repr=False, compare=False)
    leaves: dict[str, Tensor] | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("l_mlm", "l_nlu", "l_nlg", "l_task", "l_joint")}

    def backward_gradients(self) -> dict[str, np.ndarray]:
        """Run backward on the joint node and return grads keyed by name."""
        if self.node is None or self.leaves is None:
            raise RuntimeError("breakdown carries no graph")
        self.node.backward()
        return {k: lf.grad for k, lf in self.leaves.items() if lf.grad is not None}


def mask_count(n: int, cfg: MlmConfig) -> int:
    return max(cfg.min_masks, math.floor(cfg.mask_rate * n + 0.5))


def mask_for_mlm(tokens: Sequence[str], vocab: Vocab, cfg: MlmConfig, rng_seed: int) -> tuple[list[int], list[int]]:
    """Mask ``mask_count`` positions with sentinels; target interleaves them.

    Input keeps unmasked tokens and replaces masked ones, left to right,
    by sentinel 0, 1, ...; the target is sentinel/original pairs plus EOS.
    """
    n = len(tokens)
    if n < 1:
        raise ValueError("cannot mask an empty sequence")
    m = mask_count(n, cfg)
    if m >= n:
        raise ValueError(f"sequence of length {n} too short to leave context for {m} masks")
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 11]))
    positions = np.sort(rng.choice(n, size=m, replace=False))
    src: list[int] = []
    tgt: list[int] = []
    masked_rank = 0
    pos_set = set(int(p) for p in positions)
    for i, tok in enumerate(tokens):
        if i in pos_set:
            src.append(vocab.sentinel_id(masked_rank))
            tgt.append(vocab.sentinel_id(masked_rank))
            tgt.extend(encode([tok], vocab))
            masked_rank += 1
        else:
            src.extend(encode([tok], vocab))
    tgt.append(vocab.eos_id)
    return src, tgt


def splice_mlm_target(src_ids: Sequence[int], tgt_ids: Sequence[int], vocab: Vocab) -> list[str]:
    """Inverse of masking: put target tokens back into sentinel slots."""
    fills: dict[int, int] = {}
    i = 0
    while i < len(tgt_ids) and tgt_ids[i] != vocab.eos_id:
        sent = tgt_ids[i]
        fills[sent] = tgt_ids[i + 1]
        i += 2
    out = []
    for tid in src_ids:
        out.append(fills.get(tid, tid))
    return [vocab.tokens[t] for t in out]


def format_prompt(ex: TaskExample) -> tuple[str, str]:
    """Bit-exact prompt strings for each (task, direction) combination."""
    x1, x2 = detokenize(ex.x1), detokenize(ex.x2)
    if ex.task == "NLI":
        if ex.direction == "NLG":
            return f"Generate a {ex.label} sentence of: {x1}", x2
        answer = NLI_ANSWERS[NLI_CODE_TO_CLASS[ex.label]]
        return f"{x1} Question: {x2} True, False or Neither?", answer
    if ex.direction == "NLG":
        return f"Generate a {ex.label} summary of: {x1}", x2
    return f"{x1} Question: {x2} True or False?", SUMM_ANSWERS[ex.label]


def answer_to_label(task: str, answer: str) -> str:
    if task == "NLI":
        table = {v: k for k, v in NLI_ANSWERS.items()}
    elif task == "SUMM":
        table = {v: k for k, v in SUMM_ANSWERS.items()}
    else:
        raise ValueError(f"bad task {task!r}")
    if answer not in table:
        raise ValueError(f"answer {answer!r} not in the {task} answer set")
    return table[answer]


def label_to_answer(task: str, label: str) -> str:
    if task == "NLI":
        table = NLI_ANSWERS
    elif task == "SUMM":
        table = SUMM_ANSWERS
    else:
        raise ValueError(f"bad task {task!r}")
    if label not in table:
        raise ValueError(f"label {label!r} not in the {task} label set")
    return table[label]


def prompt_token_inventory() -> list[str]:
    """Every fixed token the prompt templates can introduce."""
    dummy = ["x"]
    tokens: set[str] = set()
    for task, codes in (("NLI", NLI_CODES), ("SUMM", SUMM_CODES)):
        for direction in DIRECTIONS:
            for code in codes:
                ex = TaskExample(task=task, direction=direction, x1=dummy, x2=dummy, label=code)
                inp, tgt = format_prompt(ex)
                tokens.update(tokenize(inp))
                tokens.update(tokenize(tgt))
    tokens.discard("x")
    return sorted(tokens)


# ---------------------------------------------------------------------------
# Batch mixing


@dataclass
class MlmItem:
    src_ids: list[int]
    tgt_ids: list[int]


@dataclass
class TaskItem:
    example: TaskExample


Batch = list


def _alloc(total: int, ratio: float) -> tuple[int, int]:
    first = int(math.floor(total * ratio / (1.0 + ratio) + 0.5))
    return first, total - first


def mix_stream(
    mlm_source: Sequence[Sequence[str]] | None,
    nli_source: Sequence[TaskExample] | None,
    summ_source: Sequence[TaskExample] | None,
    cfg: MixerConfig,
    batch_size: int,
    seed: int,
    *,
    vocab: Vocab,
    mlm_cfg: MlmConfig | None = None,
) -> Iterator[Batch]:
    """One epoch of stratified batches.

    Each batch holds exactly the ratio-determined number of MLM and task
    items (NLI vs SUMM split likewise); the longest stream is covered once
    per epoch while shorter streams wrap around. Task sources must already
    be direction-expanded; re-masking of MLM items happens per emission.
    """
    have_mlm = mlm_source is not None
    have_nli = nli_source is not None
    have_summ = summ_source is not None
    if have_mlm and len(mlm_source) == 0:
        raise ValueError("empty MLM source")
    if have_nli and len(nli_source) == 0:
        raise ValueError("empty NLI source")
    if have_summ and len(summ_source) == 0:
        raise ValueError("empty SUMM source")
    if not (have_mlm or have_nli or have_summ):
        raise ValueError("no data sources")
    mlm_cfg = mlm_cfg or MlmConfig()

    if have_mlm and (have_nli or have_summ):
        mlm_n, task_n = _alloc(batch_size, cfg.domain_task_ratio)
    elif have_mlm:
        mlm_n, task_n = batch_size, 0
    else:
        mlm_n, task_n = 0, batch_size
    if have_nli and have_summ:
        nli_n, summ_n = _alloc(task_n, cfg.nli_summ_ratio)
    elif have_nli:
        nli_n, summ_n = task_n, 0
    else:
        nli_n, summ_n = 0, task_n

    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    orders: dict[str, np.ndarray] = {}
    lengths: list[float] = []
    for name, source, per_batch in (("mlm", mlm_source, mlm_n), ("nli", nli_source, nli_n), ("summ", summ_source, summ_n)):
        if source is not None and per_batch > 0:
            orders[name] = rng.permutation(len(source))
            lengths.append(math.ceil(len(source) / per_batch))
    if not lengths:
        raise ValueError("batch allocation left no room for any enabled source")
    n_batches = int(max(lengths))

    cursors = {name: 0 for name in orders}

    def draw(name: str, source, count: int) -> list:
        picked = []
        order = orders[name]
        cur = cursors[name]
        for _ in range(count):
            picked.append(source[int(order[cur % len(order)])])
            cur += 1
        cursors[name] = cur
        return picked

    mask_counter = 0
    for _ in range(n_batches):
        batch: Batch = []
        if mlm_n:
            for toks in draw("mlm", mlm_source, mlm_n):
                src, tgt = mask_for_mlm(toks, vocab, mlm_cfg, rng_seed=seed * 1_000_003 + mask_counter)
                mask_counter += 1
                batch.append(MlmItem(src_ids=src, tgt_ids=tgt))
        if nli_n:
            batch.extend(TaskItem(example=ex) for ex in draw("nli", nli_source, nli_n))
        if summ_n:
            batch.extend(TaskItem(example=ex) for ex in draw("summ", summ_source, summ_n))
        yield batch


def expand_directions(
    examples: Sequence[TaskExample], directions: Sequence[str] = DIRECTIONS
) -> list[TaskExample]:
    """Emit one copy of each example per allowed direction."""
    out = []
    for ex in examples:
        for d in directions:
            out.append(TaskExample(task=ex.task, direction=d, x1=ex.x1, x2=ex.x2, label=ex.label))
    return out


# ---------------------------------------------------------------------------
# Loss composition


def encode_task_item(ex: TaskExample, vocab: Vocab) -> tuple[list[int], list[int]]:
    inp, tgt = format_prompt(ex)
    return encode(tokenize(inp), vocab), encode(tokenize(tgt), vocab) + [vocab.eos_id]


def _pad_batch(pairs: list[tuple[list[int], list[int]]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    ls = max(len(s) for s, _ in pairs)
    lt = max(len(t) for _, t in pairs)
    src = np.full((len(pairs), ls), pad_id, dtype=np.int64)
    tgt = np.full((len(pairs), lt), pad_id, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt[i, : len(t)] = t
    return src, tgt


def _component_nll(m: tm.Seq2SeqModel, leaves: dict[str, Tensor], pairs: list[tuple[list[int], list[int]]]) -> Tensor:
    src, tgt = _pad_batch(pairs, tm.PAD_ID)
    if src.shape[1] > m.config.max_len or tgt.shape[1] > m.config.max_len:
        raise ValueError("batch item exceeds model max_len")
    enc_out, kmask = tm.encode_batch(m, leaves, src)
    logits = tm.decode_batch(m, leaves, enc_out, kmask, tm.shift_right(tgt, m.bos_id))
    return tm.batched_token_mean_nll(logits, tgt)


def _split_batch(batch: Batch, vocab: Vocab):
    mlm_pairs, nlu_pairs, nlg_pairs = [], [], []
    for item in batch:
        if isinstance(item, MlmItem):
            mlm_pairs.append((item.src_ids, item.tgt_ids))
        else:
            pair = encode_task_item(item.example, vocab)
            (nlu_pairs if item.example.direction == "NLU" else nlg_pairs).append(pair)
    return mlm_pairs, nlu_pairs, nlg_pairs


def task_loss(
    m: tm.Seq2SeqModel, task_batch: Batch, weights: LossWeights, vocab: Vocab
) -> tuple[float, float, float]:
    """(l_task, l_nlu, l_nlg) over the task items of a batch."""
    if not task_batch:
        raise ValueError("empty batch")
    leaves = m.graph_leaves()
    _, nlu_pairs, nlg_pairs = _split_batch(task_batch, vocab)
    l_nlu = _component_nll(m, leaves, nlu_pairs).item() if nlu_pairs else 0.0
    l_nlg = _component_nll(m, leaves, nlg_pairs).item() if nlg_pairs else 0.0
    return weights.gamma * l_nlu + l_nlg, l_nlu, l_nlg


def joint_loss(
    m: tm.Seq2SeqModel,
    mixed_batch: Batch,
    weights: LossWeights,
    vocab: Vocab,
    *,
    mlm_enabled: bool = True,
) -> LossBreakdown:
    """Differentiable joint loss; ``node`` carries the graph for backward.

    With ``mlm_enabled`` false the composition collapses to the task loss
    (lambda is ignored), matching the no-MLM ablation semantics.
    """
    if not mixed_batch:
        raise ValueError("empty batch")
    leaves = m.graph_leaves()
    mlm_pairs, nlu_pairs, nlg_pairs = _split_batch(mixed_batch, vocab)
    zero = Tensor(0.0)
    mlm_node = _component_nll(m, leaves, mlm_pairs) if mlm_pairs else zero
    nlu_node = _component_nll(m, leaves, nlu_pairs) if nlu_pairs else zero
    nlg_node = _component_nll(m, leaves, nlg_pairs) if nlg_pairs else zero
    task_node = ad.add(ad.mul(nlu_node, weights.gamma), nlg_node)
    lam = weights.lambda_ if mlm_enabled else 0.0
    joint_node = ad.add(ad.mul(mlm_node, lam), ad.mul(task_node, 1.0 - lam))
    return LossBreakdown(
        l_mlm=mlm_node.item(),
        l_nlu=nlu_node.item(),
        l_nlg=nlg_node.item(),
        l_task=task_node.item(),
        l_joint=joint_node.item(),
        node=joint_node,
        leaves=leaves,
    )
