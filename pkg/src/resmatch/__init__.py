"""Keypoint matching with multi-head attention guided by bypass similarity scores.

Descriptor similarity is injected into cross-attention and relative-position
similarity into self-attention, both as modulated additive terms on the
attention logits.  A neighbour-restricted variant limits each query to the
top-k keys under those scores.  Everything runs on numpy with a small
reverse-mode autodiff tape.
"""

from .assignment import Assignment, MatchSet, extract_matches, matching_loss, sinkhorn
from .baseline import nn_baseline
from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    NumericalError,
    ResMatchError,
    ShapeError,
    UsageError,
)
from .features import FeatureSet, GroundTruth, SynthConfig, generate_pair, read_features, write_features
from .model import ModelConfig, ModelParams, forward
from .training import TrainConfig, evaluate, train
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "ChecksumError",
    "ConfigError",
    "FeatureSet",
    "FormatError",
    "GroundTruth",
    "MatchSet",
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "ResMatchError",
    "ShapeError",
    "SynthConfig",
    "TrainConfig",
    "UsageError",
    "evaluate",
    "extract_matches",
    "forward",
    "generate_pair",
    "load_weights",
    "matching_loss",
    "nn_baseline",
    "read_features",
    "save_weights",
    "sinkhorn",
    "train",
    "write_features",
]
