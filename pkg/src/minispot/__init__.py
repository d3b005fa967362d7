"""Desk-scale text spotter with a linear-attention token mixer and
Catmull-Rom spline feature sampling."""

from .encoder import EfficientMixer, EMTBlock, EncoderStack, TokenFeatures
from .model import SpotterConfig, SpotterModel
from .splines import catrom_basis, sample_curve, select_topk
from .tensor import Tensor, gradient_check

__all__ = [
    "Tensor",
    "gradient_check",
    "EfficientMixer",
    "EMTBlock",
    "EncoderStack",
    "TokenFeatures",
    "SpotterConfig",
    "SpotterModel",
    "catrom_basis",
    "sample_curve",
    "select_topk",
]

__version__ = "0.1.0"
