"""Dual-embedding text classifier and dual-stream transformer on a small numpy autodiff core."""
from .classifier import DuoClassifier, count_classifier_params, duo_attention_pool
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DuoError,
                     NonFiniteError, ParseError, TrainingDiverged)
from .transformer import DuoTransformer, TransformerConfig

__version__ = "0.1.0"
