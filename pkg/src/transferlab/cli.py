"""Reproducible command-line entry points.

One experiment lives in one output directory: effective config, world,
JSONL datasets, binary checkpoints, and JSON/CSV reports. Every JSON
output embeds the hash of the exact config that produced it; binary and
JSONL outputs are mapped to that hash in manifest.json. Commands exit
nonzero with an error JSON on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import datagen as dg
from . import eval_metrics as em
from . import analysis as an
from . import train_pipeline as tp
from . import text_core as tc
from .model import ModelConfig, Seq2SeqModel, load_checkpoint, save_checkpoint
from .objectives import LossWeights, MixerConfig, MlmConfig, prompt_token_inventory

NLI_CLASSES = list(tc.NLI_LABELS)


class ConfigError(Exception):
    pass


def _need(doc: dict, key: str, ctx: str = ""):
    if key not in doc:
        where = f" in {ctx}" if ctx else ""
        raise ConfigError(f"missing required config field: {key}{where}")
    return doc[key]


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(doc: dict, args: argparse.Namespace) -> dict:
    doc = json.loads(json.dumps(doc))  # deep copy
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    train = doc.setdefault("train", {})
    if getattr(args, "no_mlm", False):
        train["enable_mlm"] = False
    if getattr(args, "no_nlgu", False):
        train["enable_nlgu"] = False
    if getattr(args, "no_self_finetune", False):
        train["enable_self_finetune"] = False
    if getattr(args, "lambda_", None) is not None:
        train["lambda"] = args.lambda_
    if getattr(args, "gamma", None) is not None:
        train["gamma"] = args.gamma
    if getattr(args, "mix_ratio", None) is not None:
        train["domain_task_ratio"] = args.mix_ratio
    if getattr(args, "preset", None) is not None:
        doc.setdefault("model", {})["preset"] = args.preset
    return doc


class Experiment:
    """Paths, config hash, and manifest bookkeeping for one output dir."""

    def __init__(self, doc: dict, out_dir: str):
        self.doc = doc
        self.out = out_dir
        self.hash = config_hash(doc)
        self.seed = int(_need(doc, "seed"))
        os.makedirs(out_dir, exist_ok=True)
        for sub in ("data", "checkpoints", "reports"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        self._write_text("config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def path(self, rel: str) -> str:
        return os.path.join(self.out, rel)

    def _manifest(self) -> dict:
        p = self.path("manifest.json")
        if os.path.exists(p):
            with open(p, "r", encoding="utf-8") as fh:
                return json.load(fh)
        return {"entries": {}}

    def _record(self, rel: str) -> None:
        manifest = self._manifest()
        manifest["entries"][rel] = self.hash
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _write_text(self, rel: str, text: str) -> None:
        with open(self.path(rel), "w", encoding="utf-8") as fh:
            fh.write(text)
        if rel != "manifest.json":
            self._record(rel)

    def write_json(self, rel: str, payload: dict) -> None:
        payload = dict(payload)
        payload["config_hash"] = self.hash
        self._write_text(rel, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_jsonl(self, rel: str, records: Sequence[dict]) -> None:
        tc.write_jsonl(self.path(rel), records)
        self._record(rel)

    def write_csv(self, rel: str, text: str) -> None:
        self._write_text(rel, text)

    def save_model(self, rel: str, model: Seq2SeqModel) -> None:
        save_checkpoint(model, self.path(rel))
        self._record(rel)


# ---------------------------------------------------------------------------
# Shared assembly helpers


def world_params_from(doc: dict) -> tc.WorldParams:
    w = _need(doc, "world")
    return tc.WorldParams(
        synonym_classes=int(_need(w, "synonym_classes", "world")),
        members_per_class=int(_need(w, "members_per_class", "world")),
        persons=int(w.get("persons", 4)),
        locations=int(w.get("locations", 4)),
        modifiers=int(w.get("modifiers", 3)),
    )


def build_world(exp: Experiment) -> tc.SyntheticWorldSpec:
    return tc.gen_world(exp.seed, world_params_from(exp.doc))


def load_world(exp: Experiment) -> tc.SyntheticWorldSpec:
    p = exp.path("world.json")
    if not os.path.exists(p):
        raise ConfigError("world.json not found; run gen-world or gen-data first")
    with open(p, "r", encoding="utf-8") as fh:
        return tc.world_from_json(fh.read())


def build_vocab_for(world: tc.SyntheticWorldSpec) -> tc.Vocab:
    return tc.build_vocab(tc.world_token_inventory(world) + [prompt_token_inventory()])


def model_config_from(doc: dict, vocab: tc.Vocab, seed: int) -> ModelConfig:
    m = _need(doc, "model")
    return ModelConfig.from_preset(
        _need(m, "preset", "model"), vocab_size=len(vocab), max_len=int(_need(m, "max_len", "model")), seed=seed
    )


def train_config_from(doc: dict, seed: int) -> tp.TrainConfig:
    t = _need(doc, "train")
    return tp.TrainConfig(
        epochs=int(_need(t, "epochs", "train")),
        batch_size=int(_need(t, "batch_size", "train")),
        learning_rate=float(t.get("learning_rate", 3e-4)),
        seed=seed,
        weights=LossWeights(lambda_=float(t.get("lambda", 0.5)), gamma=float(t.get("gamma", 10.0))),
        mixer=MixerConfig(
            domain_task_ratio=float(t.get("domain_task_ratio", 1.0)),
            nli_summ_ratio=float(t.get("nli_summ_ratio", 1.0)),
        ),
        mlm=MlmConfig(mask_rate=float(t.get("mask_rate", 0.15)), min_masks=int(t.get("min_masks", 1))),
        ablations=tp.Ablations(
            enable_mlm=bool(t.get("enable_mlm", True)),
            enable_nlgu=bool(t.get("enable_nlgu", True)),
            enable_self_finetune=bool(t.get("enable_self_finetune", True)),
            enable_nlu=bool(t.get("enable_nlu", True)),
        ),
    )


def gen_config_from(doc: dict) -> dg.GenConfig:
    g = doc.get("gen", {})
    return dg.GenConfig(
        beam=int(g.get("beam", 5)), k_pairs=int(g.get("k_pairs", 3)), max_len=int(g.get("max_len", 12))
    )


def contrastive_config_from(doc: dict, seed: int) -> tp.ContrastiveConfig:
    c = doc.get("contrastive", {})
    return tp.ContrastiveConfig(
        tau=float(c.get("tau", 0.07)),
        epochs=int(c.get("epochs", 2)),
        learning_rate=float(c.get("learning_rate", 1e-4)),
        seed=seed,
        batch_size=int(c.get("batch_size", 8)),
    )


def load_model(exp: Experiment, checkpoint: str) -> tuple[Seq2SeqModel, tc.SyntheticWorldSpec, tc.Vocab]:
    world = load_world(exp)
    vocab = build_vocab_for(world)
    cfg = model_config_from(exp.doc, vocab, exp.seed)
    path = exp.path(os.path.join("checkpoints", checkpoint))
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path, cfg), world, vocab


def sts_records(pairs, domain: str) -> list[dict]:
    return [
        {
            "task": "sts",
            "domain": domain,
            "x1": tc.detokenize(s1),
            "x2": tc.detokenize(s2),
            "label": None,
            "score": score,
        }
        for s1, s2, score in pairs
    ]


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_world(exp: Experiment) -> None:
    world = build_world(exp)
    exp._write_text("world.json", tc.world_to_json(world) + "\n")


def cmd_gen_data(exp: Experiment) -> None:
    world = build_world(exp)
    exp._write_text("world.json", tc.world_to_json(world) + "\n")
    data = _need(exp.doc, "data")
    n_nli = int(_need(data, "general_nli", "data"))
    n_summ = int(_need(data, "general_summ", "data"))
    n_raw = int(_need(data, "target_raw", "data"))
    n_dev = int(_need(data, "target_nli_dev", "data"))
    n_test = int(_need(data, "target_nli_test", "data"))
    n_summ_test = int(_need(data, "target_summ_test", "data"))
    n_sts = int(data.get("target_sts", 24))

    general_nli = tc.gen_nli_data(world, "general", n_nli, seed=exp.seed + 101)
    exp.write_jsonl("data/general_nli_train.jsonl", tc.nli_to_records(general_nli, "general"))

    gold_summ = tc.gen_summ_data(world, "general", n_summ, seed=exp.seed + 102)
    gaz = world.gazetteer["general"]
    corpus_entities = dg.corpus_entity_index(
        [s.document for s in gold_summ] + [s.summary for s in gold_summ], gaz
    )
    summ_train = dg.build_summ_nlu_set(gold_summ, gaz, corpus_entities, seed=exp.seed + 103)
    exp.write_jsonl("data/general_summ_train.jsonl", dg.summ_nlu_records(summ_train, "general"))

    raw = tc.gen_raw_corpus(world, "target", n_raw, seed=exp.seed + 104)
    exp.write_jsonl("data/target_raw.jsonl", tc.raw_to_records(raw, "target"))

    dev = tc.gen_nli_data(world, "target", n_dev, seed=exp.seed + 105)
    exp.write_jsonl("data/target_nli_dev.jsonl", tc.nli_to_records(dev, "target"))
    test = tc.gen_nli_data(world, "target", n_test, seed=exp.seed + 106)
    exp.write_jsonl("data/target_nli_test.jsonl", tc.nli_to_records(test, "target"))

    summ_test = tc.gen_summ_data(world, "target", n_summ_test, seed=exp.seed + 107)
    exp.write_jsonl("data/target_summ_test.jsonl", tc.summ_to_records(summ_test, "target"))

    sts = tc.gen_sts_data(world, "target", n_sts, seed=exp.seed + 108)
    exp.write_jsonl("data/target_sts.jsonl", sts_records(sts, "target"))


def _read_training_data(exp: Experiment):
    nli = tc.records_to_nli(tc.read_jsonl(exp.path("data/general_nli_train.jsonl")))
    summ = tc.records_to_summ(tc.read_jsonl(exp.path("data/general_summ_train.jsonl")))
    raw = tc.records_to_raw(tc.read_jsonl(exp.path("data/target_raw.jsonl")))
    return nli, summ, raw


def cmd_pretrain(exp: Experiment) -> None:
    for rel in ("data/general_nli_train.jsonl", "data/general_summ_train.jsonl", "data/target_raw.jsonl"):
        if not os.path.exists(exp.path(rel)):
            raise ConfigError(f"missing dataset: {rel}; run gen-data first")
    world = load_world(exp)
    vocab = build_vocab_for(world)
    nli, summ, raw = _read_training_data(exp)
    model = Seq2SeqModel(model_config_from(exp.doc, vocab, exp.seed))
    cfg = train_config_from(exp.doc, exp.seed)
    model, record = tp.continual_pretrain(model, cfg, raw, nli, summ, vocab)
    exp.save_model("checkpoints/pretrained.bin", model)
    exp.write_json("reports/runrecord.json", json.loads(record.to_json()))
    exp.write_csv("reports/loss_curves.csv", record.curves_csv())


def cmd_self_finetune(exp: Experiment) -> None:
    cfg = train_config_from(exp.doc, exp.seed)
    if not cfg.ablations.enable_self_finetune:
        raise ConfigError("self-finetuning disabled by ablation flag")
    model, world, vocab = load_model(exp, "pretrained.bin")
    dev = tc.records_to_nli(tc.read_jsonl(exp.path("data/target_nli_dev.jsonl")))
    premises = [e.premise for e in dev]
    gen_cfg = gen_config_from(exp.doc)
    pseudo, report = dg.pseudo_nli(model, premises, gen_cfg, vocab)
    exp.write_jsonl("data/pseudo_nli.jsonl", dg.generated_nli_records(pseudo, "target"))
    exp.write_json("reports/generation_pseudo.json", json.loads(report.to_json()))
    t = exp.doc.get("train", {})
    epochs = int(t.get("sft_epochs", cfg.epochs))
    lr = t.get("sft_learning_rate")
    model = tp.self_finetune(model, pseudo, cfg, vocab, epochs=epochs, learning_rate=lr)
    exp.save_model("checkpoints/self_finetuned.bin", model)


def cmd_embed_finetune(exp: Experiment) -> None:
    source = exp.doc.get("contrastive", {}).get("from_checkpoint", "pretrained.bin")
    model, world, vocab = load_model(exp, source)
    raw = tc.records_to_raw(tc.read_jsonl(exp.path("data/target_raw.jsonl")))
    c = exp.doc.get("contrastive", {})
    n_anchors = int(c.get("anchors", 24))
    rng = np.random.default_rng(np.random.SeedSequence([exp.seed, 71]))
    picked = rng.choice(len(raw), size=min(n_anchors, len(raw)), replace=False)
    anchors = [raw[int(i)] for i in picked]
    gen_cfg = gen_config_from(exp.doc)
    sets, report = dg.contrastive_pairs(model, anchors, gen_cfg, vocab)
    records = []
    for s in sets:
        for code, side in (("entailed", s.positives), ("contradictory", s.negatives)):
            for rank, sent in enumerate(side):
                records.append(
                    {
                        "task": "nli",
                        "domain": "target",
                        "x1": tc.detokenize(s.anchor),
                        "x2": tc.detokenize(sent),
                        "label": "entailment" if code == "entailed" else "contradiction",
                        "source_id": s.source_id,
                        "control_code": code,
                        "rank": rank,
                    }
                )
    exp.write_jsonl("data/contrastive_sets.jsonl", records)
    exp.write_json("reports/generation_contrastive.json", json.loads(report.to_json()))
    ccfg = contrastive_config_from(exp.doc, exp.seed)
    model = tp.embed_finetune(model, sets, ccfg, vocab)
    exp.save_model("checkpoints/embed_finetuned.bin", model)


def cmd_eval(exp: Experiment, checkpoint: str) -> None:
    model, world, vocab = load_model(exp, checkpoint)
    gen_cfg = gen_config_from(exp.doc)

    nli_test = tc.records_to_nli(tc.read_jsonl(exp.path("data/target_nli_test.jsonl")))
    preds = [tp.classify_nli(model, e.premise, e.hypothesis, vocab) for e in nli_test]
    golds = [e.label for e in nli_test]
    metrics = {
        "accuracy": em.accuracy(preds, golds),
        "macro_f1": em.macro_f1(preds, golds, NLI_CLASSES),
    }

    summ_test = tc.records_to_summ(tc.read_jsonl(exp.path("data/target_summ_test.jsonl")))
    gaz = world.gazetteer["target"]
    bleus, rouges, nems = [], [], []
    for ex in summ_test:
        hyp = tc.tokenize(tp.summarize(model, ex.document, vocab, max_len=gen_cfg.max_len))
        hyp = hyp or ["<empty>"]
        bleus.append(em.bleu4(hyp, [ex.summary]))
        rouges.append(em.rouge_l(hyp, ex.summary))
        nems.append(em.nem(hyp, ex.summary, gaz))
    metrics["bleu4"] = float(np.mean(bleus))
    metrics["rouge_l"] = float(np.mean(rouges))
    metrics["nem"] = float(np.mean(nems))

    queries = tp.embed_batch(model, [ex.summary for ex in summ_test], vocab)
    cands = tp.embed_batch(model, [ex.document for ex in summ_test], vocab)
    golds_idx = list(range(len(summ_test)))
    for k in (1, 5, 10):
        metrics[f"acc_at_{k}"] = em.acc_at_k(queries, cands, golds_idx, k)

    sts = tc.read_jsonl(exp.path("data/target_sts.jsonl"))
    gold_scores = [float(r["score"]) for r in sts]
    sims = []
    for r in sts:
        v1 = tp.embed(model, tc.tokenize(r["x1"]), vocab)
        v2 = tp.embed(model, tc.tokenize(r["x2"]), vocab)
        sims.append(float(v1 @ v2))
    metrics["pearson_r"] = em.pearson(sims, gold_scores)
    metrics["spearman_rho"] = em.spearman(sims, gold_scores)

    report = em.MetricsReport(
        metrics=metrics,
        metadata={"model_id": checkpoint, "dataset_id": "target", "seed": exp.seed, "config_hash": exp.hash},
    )
    stem = os.path.splitext(checkpoint)[0]
    exp.write_json(f"reports/eval_{stem}.json", json.loads(report.to_json()))


def cmd_probe(exp: Experiment, checkpoint: str) -> None:
    model, world, vocab = load_model(exp, checkpoint)
    dev = tc.records_to_nli(tc.read_jsonl(exp.path("data/target_nli_dev.jsonl")))
    premises = [e.premise for e in dev]
    sample_size = int(exp.doc.get("probe", {}).get("sample_size", 100))
    result = an.probe_set(model, premises, seed=exp.seed, vocab=vocab, sample_size=sample_size)
    exp.write_json("reports/probe.json", json.loads(result.to_json()))
    exp.write_csv("reports/probe.csv", result.to_csv())


def cmd_baseline(exp: Experiment) -> None:
    train = tc.records_to_nli(tc.read_jsonl(exp.path("data/general_nli_train.jsonl")))
    test = tc.records_to_nli(tc.read_jsonl(exp.path("data/target_nli_test.jsonl")))
    _, report = em.zero_rule([e.label for e in train], [e.label for e in test])
    report.metadata.update({"dataset_id": "target_nli_test", "seed": exp.seed, "config_hash": exp.hash})
    exp.write_json("reports/baseline.json", json.loads(report.to_json()))


def cmd_report(exp: Experiment) -> None:
    reports = []
    rep_dir = exp.path("reports")
    for name in sorted(os.listdir(rep_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(rep_dir, name), "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if "metrics" in doc:
            reports.append(em.MetricsReport(metrics=doc["metrics"], metadata=doc.get("metadata", {})))
    exp.write_csv("reports/report.csv", em.reports_to_csv(reports))


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON contract
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the experiment config JSON")
    common.add_argument("--out", required=True, help="experiment output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")

    trainflags = argparse.ArgumentParser(add_help=False)
    trainflags.add_argument("--no-mlm", action="store_true")
    trainflags.add_argument("--no-nlgu", action="store_true")
    trainflags.add_argument("--no-self-finetune", action="store_true")
    trainflags.add_argument("--lambda", dest="lambda_", type=float, default=None)
    trainflags.add_argument("--gamma", type=float, default=None)
    trainflags.add_argument("--mix-ratio", dest="mix_ratio", type=float, default=None)
    trainflags.add_argument("--preset", choices=("small", "base", "large"), default=None)

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", default=None, help="checkpoint filename under checkpoints/")

    parser = _Parser(prog="transferlab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-world", parents=[common])
    sub.add_parser("gen-data", parents=[common])
    sub.add_parser("pretrain", parents=[common, trainflags])
    sub.add_parser("self-finetune", parents=[common, trainflags])
    sub.add_parser("embed-finetune", parents=[common, trainflags])
    sub.add_parser("eval", parents=[common, ckpt])
    sub.add_parser("probe", parents=[common, ckpt])
    sub.add_parser("baseline", parents=[common])
    sub.add_parser("report", parents=[common])
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    doc = apply_overrides(load_config(args.config), args)
    exp = Experiment(doc, args.out)
    if args.command == "gen-world":
        cmd_gen_world(exp)
    elif args.command == "gen-data":
        cmd_gen_data(exp)
    elif args.command == "pretrain":
        cmd_pretrain(exp)
    elif args.command == "self-finetune":
        cmd_self_finetune(exp)
    elif args.command == "embed-finetune":
        cmd_embed_finetune(exp)
    elif args.command == "eval":
        cmd_eval(exp, args.checkpoint or "self_finetuned.bin")
    elif args.command == "probe":
        cmd_probe(exp, args.checkpoint or "pretrained.bin")
    elif args.command == "baseline":
        cmd_baseline(exp)
    elif args.command == "report":
        cmd_report(exp)
    return 0


def main() -> None:
    try:
        sys.exit(run())
    except SystemExit:
        raise
    except Exception as exc:  # machine-readable failure contract
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        sys.exit(1)
