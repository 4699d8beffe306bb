"""Spiking-neural-network keyword spotting on raw waveforms."""

from .model import Model, ModelConfig, build_model, make_variant
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "Tensor", "backward", "build_model",
           "make_variant", "no_grad", "__version__"]
