"""Singer identification with a frozen attention-CRNN embedding and a cosine KNN output layer."""

from .errors import (
    ConfigError,
    ContractError,
    DatasetError,
    DegenerateVectorError,
    DimensionError,
    FormatError,
    KnnSidError,
    NumericError,
)
from .estimator import KNNNetClassifier
from .features import AudioClip, LogMelBlockTransformer, MelBlock, SpectrogramConfig
from .knn import KNNHeadClassifier, ReferenceMatrix
from .pipeline import KnnNet, TrainConfig, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ConfigError",
    "ContractError",
    "DatasetError",
    "DegenerateVectorError",
    "DimensionError",
    "FormatError",
    "KNNHeadClassifier",
    "KNNNetClassifier",
    "KnnNet",
    "KnnSidError",
    "LogMelBlockTransformer",
    "MelBlock",
    "NumericError",
    "ReferenceMatrix",
    "SpectrogramConfig",
    "TrainConfig",
    "load_model",
    "save_model",
]
