"""Fast-slow streaming transducer with deliberation, at desk scale.

A numpy-backed library covering the full loop: a small autodiff tensor core,
chunked streaming encoders, the shared predictor/joiner transducer with a
text-conditioned merge branch, forward-backward transducer losses with
alignment restriction, parallel fast/slow beam search with emission-time
bookkeeping, WER and latency metrics, synthetic corpus tooling, and a CLI.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    BLANK_ID,
    BOS_ID,
    SynthConfig,
    UtteranceRecord,
    Vocabulary,
    generate_synthetic_corpus,
    load_corpus,
    mask_tokens,
    read_feature_file,
    synthesize_corpus,
    truncate_hypothesis,
    write_feature_file,
)
from .decoding import (
    BeamConfig,
    DecodeResult,
    Hypothesis,
    ModelSearchSpace,
    SearchSpace,
    TableSearchSpace,
    beam_search_segment,
    fast_only_beam_search,
    finalize,
    get_best_hypo,
    greedy_search,
    parallel_beam_search,
)
from .loss import AlignmentRestriction, Lattice, ar_rnnt_loss, joint_loss, rnnt_loss
from .metrics import DelayReport, WerReport, emission_delays, nearest_rank_percentile, sliced_wer, wer
from .model import FastSlowTransducer, ModelConfig
from .tensor import AdamState, GradientTape, Tensor, adam_step, backward, no_grad, parameter

__all__ = [
    "AdamState",
    "AlignmentRestriction",
    "BeamConfig",
    "BLANK_ID",
    "BOS_ID",
    "DecodeResult",
    "DelayReport",
    "FastSlowTransducer",
    "GradientTape",
    "Hypothesis",
    "Lattice",
    "ModelConfig",
    "ModelSearchSpace",
    "SearchSpace",
    "SynthConfig",
    "TableSearchSpace",
    "Tensor",
    "UtteranceRecord",
    "Vocabulary",
    "WerReport",
    "adam_step",
    "ar_rnnt_loss",
    "backward",
    "beam_search_segment",
    "emission_delays",
    "fast_only_beam_search",
    "finalize",
    "generate_synthetic_corpus",
    "get_best_hypo",
    "greedy_search",
    "joint_loss",
    "load_checkpoint",
    "load_corpus",
    "mask_tokens",
    "nearest_rank_percentile",
    "no_grad",
    "parallel_beam_search",
    "parameter",
    "read_feature_file",
    "rnnt_loss",
    "save_checkpoint",
    "sliced_wer",
    "synthesize_corpus",
    "truncate_hypothesis",
    "wer",
    "write_feature_file",
]
