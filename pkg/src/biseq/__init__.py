"""Neural bi-sequence classification: encoders, combinators, training and evaluation."""
from ._kernels import BACKEND
from .combinators import ModelSpec, build_model, enumerate_architectures, validate_spec
from .errors import (
    BiseqError,
    ConfigurationError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    ParseError,
    UndefinedMetricError,
    UsageError,
)
from .train import SequencePair, TrainConfig, score_dataset, train_model

__version__ = "0.1.0"
