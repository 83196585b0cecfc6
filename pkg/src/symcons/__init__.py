"""Consistency-trained symmetric sentence-pair classification.

A desk-scale toolkit: data synthesis and ingestion, a whitespace tokenizer
with an extra pair-classification token, a from-scratch float64 transformer
with reverse-mode autodiff, dual-pass consistency objectives (cross-entropy
plus weighted KL/JS divergence), a deterministic trainer with decoupled
weight decay, and a consistency evaluation kit with McNemar testing.
"""

from .autodiff import ComputationTape, GradCheckReport, Tensor, gradient_check
from .corpus import (
    DatasetSplit,
    SentencePair,
    load_jsonl,
    reverse_augment,
    save_jsonl,
    split_dataset,
    synth_non_symmetric,
    synth_single,
    synth_symmetric,
    synthetic_pair_label,
)
from .encoder import (
    DualPassOutput,
    ModelConfig,
    ModelState,
    dual_forward,
    dual_forward_dataset,
    forward,
    forward_batch,
    init_model,
)
from .evalkit import (
    ConsistencyReport,
    McNemarResult,
    build_report,
    classification_metrics,
    confidence_consistency,
    extract_disagreements,
    mcnemar_test,
    prediction_consistency,
)
from .objective import (
    LambdaSchedule,
    LossBreakdown,
    combined_loss,
    cross_entropy,
    js_divergence,
    kl_divergence,
    lambda_at,
)
from .tokenizer import (
    EncodedInput,
    Vocabulary,
    build_vocab,
    encode_pair,
    encode_single,
    load_vocab,
    save_vocab,
)
from .trainer import (
    Checkpoint,
    OptimizerMoments,
    TrainConfig,
    TrainLog,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    train,
    transfer_finetune,
)

__version__ = "0.1.0"
