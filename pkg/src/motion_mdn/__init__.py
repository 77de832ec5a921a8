"""Sequence-to-sequence LSTM encoders with mixture-density futures for motion retrieval."""
from .lstm import BACKEND
from .seq2seq import Model, ModelConfig, model_init

__version__ = "0.1.0"
__all__ = ["BACKEND", "Model", "ModelConfig", "model_init", "__version__"]
