"""Human action recognition from Gaussian-weighted frame aggregates.

Raw frames are collapsed by a Gaussian weighing function, a 3D CNN extracts
spatio-temporal features, and an LSTM classifies the feature sequence.
"""

from .errors import (
    ConfigError,
    CorruptionError,
    DomainError,
    FormatError,
    GWFError,
    InputError,
    ShapeError,
    StateError,
)
from .model import Model, build_preset, freeze_layers, model_backward, model_forward, total_parameters
from .sampler import ClipVolume, FrameSequence, aggregate_video, aggregate_window, gaussian_weights, partition_sequence
from .sequence import FeatureSequence, LSTMParams, build_feature_sequence, lstm_backward, lstm_classify, lstm_step
from .training import TrainingConfig, evaluate, fine_tune, train

__version__ = "0.1.0"
