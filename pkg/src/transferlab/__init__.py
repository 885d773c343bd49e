"""Zero-shot domain transfer experiments on synthetic text worlds."""

from .autodiff import Tensor, no_grad
from .model import (
    Adam,
    AttentionTrace,
    ModelConfig,
    Seq2SeqModel,
    beam_search,
    forward,
    greedy_decode,
    load_checkpoint,
    nll_teacher_forced,
    save_checkpoint,
    score_candidates,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    MixerConfig,
    MlmConfig,
    TaskExample,
    answer_to_label,
    format_prompt,
    joint_loss,
    label_to_answer,
    mask_for_mlm,
    mix_stream,
    task_loss,
)
from .text_core import (
    EntitySpan,
    NliExample,
    SummExample,
    SyntheticWorldSpec,
    Vocab,
    WorldParams,
    build_vocab,
    decode,
    encode,
    find_entities,
    gen_nli_data,
    gen_raw_corpus,
    gen_summ_data,
    gen_world,
)
from .datagen import ContrastiveSet, GenConfig, build_summ_nlu_set, contrastive_pairs, counterfactual_summary, pseudo_nli
from .train_pipeline import (
    Ablations,
    ContrastiveConfig,
    RunRecord,
    TrainConfig,
    classify_nli,
    continual_pretrain,
    embed,
    embed_finetune,
    infonce_multi,
    self_finetune,
    summarize,
)
from .eval_metrics import (
    MetricsReport,
    acc_at_k,
    accuracy,
    bleu4,
    macro_f1,
    nem,
    pearson,
    rouge_l,
    spearman,
    zero_rule,
)
from .analysis import ProbeResult, control_code_attention, probe_set

__version__ = "0.1.0"
