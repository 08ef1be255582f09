"""Coarse-to-fine speech/image retrieval on a small numpy autodiff engine."""

from .data import LEARNABILITY_CORPUS, Corpus, CorpusConfig, generate_corpus, read_corpus, write_corpus
from .evaluation import MetricReport, evaluate, recall_at_k
from .model import CrossModalRetriever, ModelConfig, coarse_score, load_checkpoint, save_checkpoint
from .objective import LossWeights, build_mask, combined_loss, masked_infonce
from .retrieval import CoarseIndex, TargetStore, bench, build_index, coarse_retrieve, ctf_retrieve, fine_retrieve
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "LEARNABILITY_CORPUS",
    "CoarseIndex",
    "Corpus",
    "CorpusConfig",
    "CrossModalRetriever",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "TargetStore",
    "TrainConfig",
    "bench",
    "build_index",
    "build_mask",
    "coarse_retrieve",
    "coarse_score",
    "combined_loss",
    "ctf_retrieve",
    "evaluate",
    "fine_retrieve",
    "generate_corpus",
    "load_checkpoint",
    "lr_at",
    "masked_infonce",
    "read_corpus",
    "recall_at_k",
    "save_checkpoint",
    "train",
    "write_corpus",
]
