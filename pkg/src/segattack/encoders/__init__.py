from .base import EmbeddingVector, EncoderOracle, distortion_gradient, forward, vjp
from .toy import ConvLayer, ToyConvEncoder

__all__ = ["EmbeddingVector", "EncoderOracle", "ToyConvEncoder", "ConvLayer",
           "forward", "vjp", "distortion_gradient"]
