"""Singular-value fine-tuning of a toy dual-encoder (image/text) transformer.

Encoder weights are factored once by SVD; adaptation moves only the singular
values. Also included: residual-stream head decomposition, corpus span
projection with greedy description selection, and head ranking by
singular-value shift.
"""

__version__ = "0.1.0"

from ._accel import BACKEND
from .adapt import (
    AdamWState,
    AdaptationRecord,
    AdaptHyper,
    FewShotTask,
    adamw_step,
    adapt_few_shot,
    contrastive_pretrain,
    evaluate,
    harmonic_mean,
    run_base_to_novel,
    sample_few_shot,
)
from .clip_core import (
    DualEncoderModel,
    EmbeddingBatch,
    ModelConfig,
    class_probabilities,
    encode_image,
    encode_text,
    init_model,
    predict,
)
from .encoder import EncoderConfig, encoder_backward, encoder_forward
from .linalg import SvdFactors, layer_norm, make_rng, matmul, softmax_rows, svd
from .svd_param import RankMaskSpec, SvdLinear, count_trainable, decompose_layer

__all__ = [
    "BACKEND",
    "AdamWState",
    "AdaptHyper",
    "AdaptationRecord",
    "DualEncoderModel",
    "EmbeddingBatch",
    "EncoderConfig",
    "FewShotTask",
    "ModelConfig",
    "RankMaskSpec",
    "SvdFactors",
    "SvdLinear",
    "adamw_step",
    "adapt_few_shot",
    "class_probabilities",
    "contrastive_pretrain",
    "count_trainable",
    "decompose_layer",
    "encode_image",
    "encode_text",
    "encoder_backward",
    "encoder_forward",
    "evaluate",
    "harmonic_mean",
    "init_model",
    "layer_norm",
    "make_rng",
    "matmul",
    "predict",
    "run_base_to_novel",
    "sample_few_shot",
    "softmax_rows",
    "svd",
]
