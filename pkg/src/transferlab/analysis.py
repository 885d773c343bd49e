"""How much generation attends to the control code in the prompt."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as tm
from .objectives import NLI_CLASS_TO_CODE, TaskExample, format_prompt
from .text_core import NLI_LABELS, Vocab, encode, tokenize


@dataclass
class ProbeResult:
    values: dict[str, list[float]]  # label -> per-example probe values
    mean: dict[str, float]
    std: dict[str, float]
    n: int

    def overall_mean(self) -> float:
        flat = [v for vals in self.values.values() for v in vals]
        return float(np.mean(flat))

    def to_json(self) -> str:
        return json.dumps(
            {"n": self.n, "mean": self.mean, "std": self.std, "values": self.values}, indent=2, sort_keys=True
        )

    def to_csv(self) -> str:
        lines = ["label,mean,std,n"]
        for label in sorted(self.mean):
            lines.append(f"{label},{self.mean[label]},{self.std[label]},{self.n}")
        return "\n".join(lines) + "\n"


def control_code_attention(
    model: tm.Seq2SeqModel, premise: Sequence[str], label: str, vocab: Vocab
) -> float:
    """Max cross-attention mass on the control-code positions during generation.

    Greedy-generates the hypothesis, then replays it teacher-forced with
    attention capture; the causal decoder makes the replayed weights equal
    the ones used during generation. Maximum is over decoder steps, layers,
    and heads of the mass summed across the code's token positions.
    """
    code = NLI_CLASS_TO_CODE.get(label, label)
    if code not in NLI_CLASS_TO_CODE.values():
        raise ValueError(f"bad label {label!r}")
    ex = TaskExample(task="NLI", direction="NLG", x1=list(premise), x2=["_"], label=code)
    prompt, _ = format_prompt(ex)
    prompt_tokens = tokenize(prompt)
    positions = [i for i, t in enumerate(prompt_tokens) if t == code]
    if not positions:
        raise ValueError(f"control code {code!r} not found in the formatted prompt")
    src_ids = encode(prompt_tokens, vocab)
    generated = tm.greedy_decode(model, src_ids, model.config.max_len - 1)
    target = generated + [vocab.eos_id]
    _, trace = tm.forward(model, src_ids, target, capture=True)
    mass = trace.weights[:, :, :, positions].sum(axis=-1)
    return float(mass.max())


def probe_set(
    model: tm.Seq2SeqModel, premises: Sequence[Sequence[str]], seed: int, vocab: Vocab, sample_size: int = 100
) -> ProbeResult:
    """Probe a seeded sample of premises with each of the three labels."""
    if not premises:
        raise ValueError("premises must be nonempty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 61]))
    n = min(sample_size, len(premises))
    picked = rng.choice(len(premises), size=n, replace=False)
    values: dict[str, list[float]] = {label: [] for label in NLI_LABELS}
    for idx in picked:
        for label in NLI_LABELS:
            values[label].append(control_code_attention(model, premises[int(idx)], label, vocab))
    mean = {label: float(np.mean(vals)) for label, vals in values.items()}
    std = {label: float(np.std(vals)) for label, vals in values.items()}
    return ProbeResult(values=values, mean=mean, std=std, n=n)
