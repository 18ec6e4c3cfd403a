"""Desk-scale text-to-music MOS prediction pipeline.

Co-attention fusion of precomputed audio/text embedding sequences, dual
regression heads, a Huber + entropic-transport training objective, and
a rank-correlation evaluation harness, all in verifiable float64.
"""

from .errors import ConfigError, DataError, MetricError, NumericError, WhisqError
from .model import WhisqConfig, ModelParams, ATTENTION_MODES

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "MetricError", "NumericError", "WhisqError",
    "WhisqConfig", "ModelParams", "ATTENTION_MODES", "__version__",
]
