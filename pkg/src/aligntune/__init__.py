"""Document tagging with contrastive image/text alignment, at desk scale."""

from .data import CorpusConfig, DocumentSample, generate_corpus, load_corpus, save_corpus
from .encoders import AlignmentTuningModel, EncoderConfig
from .losses import LossBundle
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentTuningModel",
    "CorpusConfig",
    "DocumentSample",
    "EncoderConfig",
    "LossBundle",
    "TrainConfig",
    "evaluate",
    "generate_corpus",
    "load_corpus",
    "save_corpus",
    "train",
]
