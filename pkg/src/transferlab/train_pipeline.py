"""Training procedures, task inference, and contrastive embedding finetuning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as tm
from .autodiff import Tensor
from .objectives import (
    NLI_ANSWERS,
    NLI_CLASS_TO_CODE,
    LossWeights,
    MixerConfig,
    MlmConfig,
    TaskExample,
    encode_task_item,
    expand_directions,
    format_prompt,
    joint_loss,
    mix_stream,
)
from .text_core import NliExample, SummExample, Vocab, decode, detokenize, encode


@dataclass
class Ablations:
    enable_mlm: bool = True
    enable_nlgu: bool = True
    enable_self_finetune: bool = True
    enable_nlu: bool = True  # probe-support switch: False trains NLG-only


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mixer: MixerConfig = field(default_factory=MixerConfig)
    mlm: MlmConfig = field(default_factory=MlmConfig)
    ablations: Ablations = field(default_factory=Ablations)


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    epochs: int = 2
    learning_rate: float = 1e-4
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train: dict[str, float]
    val: dict[str, float]


@dataclass
class RunRecord:
    epochs: list[EpochRecord]
    selected_epoch: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "selected_epoch": self.selected_epoch,
                "epochs": [{"epoch": e.epoch, "train": e.train, "val": e.val} for e in self.epochs],
            },
            indent=2,
        )

    def curves_csv(self) -> str:
        lines = ["epoch,l_mlm,l_nlu,l_nlg,l_task,l_joint,split"]
        for rec in self.epochs:
            for split, vals in (("train", rec.train), ("val", rec.val)):
                lines.append(
                    f"{rec.epoch},{vals['l_mlm']},{vals['l_nlu']},{vals['l_nlg']},{vals['l_task']},{vals['l_joint']},{split}"
                )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_json(text: str) -> "RunRecord":
        doc = json.loads(text)
        return RunRecord(
            epochs=[EpochRecord(epoch=e["epoch"], train=e["train"], val=e["val"]) for e in doc["epochs"]],
            selected_epoch=doc["selected_epoch"],
        )


def task_directions(ablations: Ablations) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(NLI directions, SUMM directions) under the ablation switches."""
    if not ablations.enable_nlgu:
        if not ablations.enable_nlu:
            raise ValueError("enable_nlgu=False requires enable_nlu=True (NLI becomes NLU-only)")
        return ("NLU",), ("NLG",)
    if not ablations.enable_nlu:
        return ("NLG",), ("NLG",)
    return ("NLU", "NLG"), ("NLU", "NLG")


def nli_task_examples(examples: Sequence[NliExample], directions: Sequence[str]) -> list[TaskExample]:
    base = [
        TaskExample(task="NLI", direction="NLU", x1=e.premise, x2=e.hypothesis, label=NLI_CLASS_TO_CODE[e.label])
        for e in examples
    ]
    return expand_directions(base, directions)


def summ_task_examples(examples: Sequence[SummExample], directions: Sequence[str]) -> list[TaskExample]:
    base = [
        TaskExample(task="SUMM", direction="NLU", x1=e.document, x2=e.summary, label=e.veracity) for e in examples
    ]
    return expand_directions(base, directions)


def _split(items: list, rng: np.random.Generator) -> tuple[list, list]:
    # below 5 items there is no room for a held-out split; validate on train
    if len(items) < 5:
        return list(items), list(items)
    order = rng.permutation(len(items))
    n_val = max(1, len(items) // 10)
    val = [items[i] for i in order[:n_val]]
    train = [items[i] for i in order[n_val:]]
    return train, val


def _mean_breakdown(dicts: list[dict[str, float]]) -> dict[str, float]:
    keys = ("l_mlm", "l_nlu", "l_nlg", "l_task", "l_joint")
    n = max(1, len(dicts))
    return {k: sum(d[k] for d in dicts) / n for k in keys}


def _epoch_stream(cfg: TrainConfig, sources, vocab: Vocab, seed: int):
    mlm_src, nli_src, summ_src = sources
    return mix_stream(
        mlm_src,
        nli_src,
        summ_src,
        cfg.mixer,
        cfg.batch_size,
        seed,
        vocab=vocab,
        mlm_cfg=cfg.mlm,
    )


def continual_pretrain(
    model: tm.Seq2SeqModel,
    cfg: TrainConfig,
    mlm_corpus: Sequence[Sequence[str]] | None,
    nli_data: Sequence[NliExample],
    summ_data: Sequence[SummExample],
    vocab: Vocab,
) -> tuple[tm.Seq2SeqModel, RunRecord]:
    """Joint optimization of the masked-token and task losses.

    Honors the ablation switches, tracks per-epoch train/val breakdowns,
    and restores the epoch with the lowest validation joint loss.
    """
    abl = cfg.ablations
    nli_dirs, summ_dirs = task_directions(abl)
    nli_examples = nli_task_examples(nli_data, nli_dirs) if nli_data else None
    summ_examples = summ_task_examples(summ_data, summ_dirs) if summ_data else None
    mlm_source = list(mlm_corpus) if (abl.enable_mlm and mlm_corpus) else None
    if abl.enable_mlm and not mlm_source:
        raise ValueError("MLM enabled but the in-domain corpus is empty")
    if nli_examples is None and summ_examples is None and mlm_source is None:
        raise ValueError("nothing to train on")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41]))
    mlm_train, mlm_val = _split(mlm_source, rng) if mlm_source else (None, None)
    nli_train, nli_val = _split(nli_examples, rng) if nli_examples else (None, None)
    summ_train, summ_val = _split(summ_examples, rng) if summ_examples else (None, None)

    optimizer = tm.Adam()
    records: list[EpochRecord] = []
    best_val = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = 0
    for epoch in range(cfg.epochs):
        train_dicts = []
        for batch in _epoch_stream(cfg, (mlm_train, nli_train, summ_train), vocab, cfg.seed * 1000 + epoch):
            bd = joint_loss(model, batch, cfg.weights, vocab, mlm_enabled=abl.enable_mlm)
            grads = bd.backward_gradients()
            optimizer.step(model.params, grads, cfg.learning_rate)
            train_dicts.append(bd.as_dict())
        val_dicts = []
        with ad.no_grad():
            for batch in _epoch_stream(cfg, (mlm_val, nli_val, summ_val), vocab, cfg.seed * 1000 + 500_000 + epoch):
                bd = joint_loss(model, batch, cfg.weights, vocab, mlm_enabled=abl.enable_mlm)
                val_dicts.append(bd.as_dict())
        train_mean = _mean_breakdown(train_dicts)
        val_mean = _mean_breakdown(val_dicts)
        records.append(EpochRecord(epoch=epoch, train=train_mean, val=val_mean))
        if val_mean["l_joint"] < best_val:
            best_val = val_mean["l_joint"]
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
    model.params = best_params
    return model, RunRecord(epochs=records, selected_epoch=best_epoch)


def self_finetune(
    model: tm.Seq2SeqModel,
    pseudo: Sequence[NliExample],
    cfg: TrainConfig,
    vocab: Vocab,
    epochs: int | None = None,
    learning_rate: float | None = None,
) -> tm.Seq2SeqModel:
    """Finetune on NLU-formatted pseudo NLI examples only."""
    if not pseudo:
        raise ValueError("pseudo data must be nonempty")
    if not cfg.ablations.enable_self_finetune:
        raise ValueError("self-finetuning disabled by ablation")
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    examples = nli_task_examples(pseudo, ("NLU",))
    # plain NLU finetuning: gamma would only rescale the learning rate here
    weights = LossWeights(lambda_=0.0, gamma=1.0)
    optimizer = tm.Adam()
    for epoch in range(epochs):
        stream = mix_stream(
            None, examples, None, cfg.mixer, cfg.batch_size, cfg.seed * 1000 + 900_000 + epoch, vocab=vocab
        )
        for batch in stream:
            bd = joint_loss(model, batch, weights, vocab, mlm_enabled=False)
            grads = bd.backward_gradients()
            optimizer.step(model.params, grads, lr)
    return model


def self_finetune_losses(
    model: tm.Seq2SeqModel,
    pseudo: Sequence[NliExample],
    cfg: TrainConfig,
    vocab: Vocab,
    epochs: int,
    learning_rate: float | None = None,
) -> list[float]:
    """Like self_finetune but returns the per-epoch mean training loss."""
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    examples = nli_task_examples(pseudo, ("NLU",))
    weights = LossWeights(lambda_=0.0, gamma=1.0)
    optimizer = tm.Adam()
    history = []
    for epoch in range(epochs):
        stream = mix_stream(
            None, examples, None, cfg.mixer, cfg.batch_size, cfg.seed * 1000 + 900_000 + epoch, vocab=vocab
        )
        losses = []
        for batch in stream:
            bd = joint_loss(model, batch, weights, vocab, mlm_enabled=False)
            grads = bd.backward_gradients()
            optimizer.step(model.params, grads, lr)
            losses.append(bd.l_joint)
        history.append(sum(losses) / len(losses))
    return history


_ANSWER_ORDER = ("True", "False", "Neither")  # fixed tie-break order


def classify_nli(model: tm.Seq2SeqModel, premise: Sequence[str], hypothesis: Sequence[str], vocab: Vocab) -> str:
    """Constrained label scoring over the three answer strings."""
    ex = TaskExample(task="NLI", direction="NLU", x1=list(premise), x2=list(hypothesis), label="entailed")
    prompt, _ = format_prompt(ex)
    src_ids = encode(prompt.split(), vocab)
    candidates = [encode([ans], vocab) + [vocab.eos_id] for ans in _ANSWER_ORDER]
    scores = tm.score_candidates(model, src_ids, candidates)
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    answer = _ANSWER_ORDER[best]
    return {v: k for k, v in NLI_ANSWERS.items()}[answer]


def summarize(model: tm.Seq2SeqModel, document: Sequence[str], vocab: Vocab, max_len: int | None = None) -> str:
    """Greedy generation under the entailed-summary prompt."""
    if not document:
        raise ValueError("document must be nonempty")
    ex = TaskExample(task="SUMM", direction="NLG", x1=list(document), x2=["_"], label="entailed")
    prompt, _ = format_prompt(ex)
    src_ids = encode(prompt.split(), vocab)
    out = tm.greedy_decode(model, src_ids, max_len or model.config.max_len)
    tokens = [t for t in decode(out, vocab) if not (t.startswith("<") and t.endswith(">"))]
    return detokenize(tokens)


def _embed_graph(model: tm.Seq2SeqModel, leaves: dict[str, Tensor], src: np.ndarray) -> Tensor:
    """Unit-norm mean of final encoder states over non-PAD positions."""
    enc_out, _ = tm.encode_batch(model, leaves, src)
    keep = (src != tm.PAD_ID).astype(np.float64)[:, :, None]
    counts = keep.sum(axis=1)
    summed = ad.tsum(ad.mul(enc_out, keep), axis=1)
    mean = ad.mul(summed, 1.0 / counts)
    sq = ad.tsum(ad.mul(mean, mean), axis=1, keepdims=True)
    return ad.mul(mean, ad.power(sq, -0.5))


def embed(model: tm.Seq2SeqModel, sentence: Sequence[str], vocab: Vocab) -> np.ndarray:
    if not sentence:
        raise ValueError("sentence must be nonempty")
    ids = np.array([encode(list(sentence), vocab)], dtype=np.int64)
    with ad.no_grad():
        leaves = model.graph_leaves()
        vec = _embed_graph(model, leaves, ids)
    return vec.data[0].copy()


def embed_batch(model: tm.Seq2SeqModel, sentences: Sequence[Sequence[str]], vocab: Vocab) -> np.ndarray:
    if not sentences:
        raise ValueError("sentences must be nonempty")
    encoded = [encode(list(s), vocab) for s in sentences]
    width = max(len(e) for e in encoded)
    src = np.full((len(encoded), width), tm.PAD_ID, dtype=np.int64)
    for i, e in enumerate(encoded):
        src[i, : len(e)] = e
    with ad.no_grad():
        leaves = model.graph_leaves()
        vec = _embed_graph(model, leaves, src)
    return vec.data.copy()


def _softplus(z: Tensor) -> Tensor:
    m = np.maximum(z.data, 0.0)
    return ad.add(ad.log(ad.add(ad.exp(ad.add(z, -m)), np.exp(-m))), m)


def _cosine_rows(mat: Tensor, anchor: Tensor) -> Tensor:
    dots = ad.matmul(mat, ad.transpose(anchor, (1, 0)))
    mat_norm = ad.power(ad.tsum(ad.mul(mat, mat), axis=1, keepdims=True), 0.5)
    anchor_norm = ad.power(ad.tsum(ad.mul(anchor, anchor), axis=1, keepdims=True), 0.5)
    return ad.mul(dots, ad.power(ad.mul(mat_norm, anchor_norm), -1.0))


def infonce_multi(anchor_vec, positive_vecs, negative_vecs, tau: float) -> Tensor:
    """Multi-positive InfoNCE: -log of the positives' share of similarity mass."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchor = anchor_vec if isinstance(anchor_vec, Tensor) else Tensor(np.asarray(anchor_vec, dtype=np.float64))
    pos = positive_vecs if isinstance(positive_vecs, Tensor) else Tensor(np.asarray(positive_vecs, dtype=np.float64))
    neg = negative_vecs if isinstance(negative_vecs, Tensor) else Tensor(np.asarray(negative_vecs, dtype=np.float64))
    if anchor.data.ndim == 1:
        anchor = ad.reshape(anchor, (1, anchor.data.size))
    if pos.data.size == 0 or neg.data.size == 0:
        raise ValueError("positives and negatives must be nonempty")
    for name, t in (("anchor", anchor), ("positive", pos), ("negative", neg)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.any(norms == 0.0):
            raise ValueError(f"zero-norm {name} vector")
    lse_pos = ad.logsumexp(ad.mul(ad.reshape(_cosine_rows(pos, anchor), (-1,)), 1.0 / tau))
    lse_neg = ad.logsumexp(ad.mul(ad.reshape(_cosine_rows(neg, anchor), (-1,)), 1.0 / tau))
    return _softplus(ad.add(lse_neg, ad.mul(lse_pos, -1.0)))


def embed_finetune(model: tm.Seq2SeqModel, sets, cfg: ContrastiveConfig, vocab: Vocab) -> tm.Seq2SeqModel:
    """Minimize mean multi-positive InfoNCE; only encoder-side parameters move."""
    if not sets:
        raise ValueError("contrastive sets must be nonempty")
    optimizer = tm.Adam()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 53]))
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(sets))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [sets[i] for i in order[start : start + cfg.batch_size]]
            sentences: list[list[str]] = []
            layout = []
            for cs in chunk:
                a_idx = len(sentences)
                sentences.append(list(cs.anchor))
                p_idx = list(range(len(sentences), len(sentences) + len(cs.positives)))
                sentences.extend(list(p) for p in cs.positives)
                n_idx = list(range(len(sentences), len(sentences) + len(cs.negatives)))
                sentences.extend(list(n) for n in cs.negatives)
                layout.append((a_idx, p_idx, n_idx))
            encoded = [encode(s, vocab) for s in sentences]
            width = max(len(e) for e in encoded)
            src = np.full((len(encoded), width), tm.PAD_ID, dtype=np.int64)
            for i, e in enumerate(encoded):
                src[i, : len(e)] = e
            leaves = model.graph_leaves()
            embs = _embed_graph(model, leaves, src)
            total: Tensor | None = None
            for a_idx, p_idx, n_idx in layout:
                a = ad.gather_rows(embs, np.array([a_idx]))
                p = ad.gather_rows(embs, np.array(p_idx))
                n = ad.gather_rows(embs, np.array(n_idx))
                loss = infonce_multi(a, p, n, cfg.tau)
                total = loss if total is None else ad.add(total, loss)
            total = ad.mul(total, 1.0 / len(layout))
            total.backward()
            grads = {k: lf.grad for k, lf in leaves.items() if lf.grad is not None}
            optimizer.step(model.params, grads, cfg.learning_rate)
    return model
