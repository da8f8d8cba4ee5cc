"""Online supervised speaker diarization with unbounded interleaved-state RNNs.

A single GRU is shared by every speaker; each speaker in a hypothesis gets its
own instance (hidden state plus running output mean).  Training uses either the
next-embedding MSE loss or the sample mean loss (SML); decoding is online beam
search over the speaker-change / ddCRP / Gaussian factorization.
"""

from uisrnn.data import (
    Dataset,
    EmbeddingSequence,
    LabeledRecording,
    LabelSequence,
    PcaProjection,
    RttmSegment,
    SpeakerTrainSequence,
    build_training_sequences,
    parse_rttm,
    pca_apply,
    pca_fit,
    relabel_canonical,
    segments_to_frame_labels,
    stratified_split,
)
from uisrnn.decoder import (
    DecodeConfig,
    beam_decode,
    cumulative_mean_decode,
    exhaustive_decode,
    score_labeling,
)
from uisrnn.evaluation import DerBreakdown, FrameReference, der, der_corpus, optimal_mapping
from uisrnn.model import ModelConfig, SpeakerInstanceState, SpeakerModel
from uisrnn.priors import BlockCounts, PriorParams, estimate_alpha, estimate_p0, estimate_priors
from uisrnn.synthesis import SynthConfig, generate
from uisrnn.training import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "BlockCounts",
    "Dataset",
    "DecodeConfig",
    "DerBreakdown",
    "EmbeddingSequence",
    "FrameReference",
    "LabelSequence",
    "LabeledRecording",
    "ModelConfig",
    "PcaProjection",
    "PriorParams",
    "RttmSegment",
    "SpeakerInstanceState",
    "SpeakerModel",
    "SpeakerTrainSequence",
    "SynthConfig",
    "TrainConfig",
    "TrainReport",
    "beam_decode",
    "build_training_sequences",
    "cumulative_mean_decode",
    "der",
    "der_corpus",
    "estimate_alpha",
    "estimate_p0",
    "estimate_priors",
    "exhaustive_decode",
    "generate",
    "optimal_mapping",
    "parse_rttm",
    "pca_apply",
    "pca_fit",
    "relabel_canonical",
    "score_labeling",
    "segments_to_frame_labels",
    "stratified_split",
    "train",
]
