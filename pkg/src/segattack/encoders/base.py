"""The encoder oracle interface: forward passes and vector-Jacobian products."""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError


@dataclass(frozen=True)
class EmbeddingVector:
    data: np.ndarray
    encoder_id: str

    def __post_init__(self):
        if self.data.ndim != 1:
            raise InvalidArgumentError(f"embedding must be 1-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("embedding contains non-finite values")

    def __len__(self):
        return self.data.shape[0]


class EncoderOracle(abc.ABC):
    """A differentiable image encoder ``phi: [0,1]^{h x w x c} -> R^n``.

    ``expected_input`` is either a ``(height, width, channels)`` tuple or the
    string ``"any"`` for encoders that accept every spatial size.
    """

    encoder_id: str
    expected_input: tuple[int, int, int] | str = "any"
    channels: int = 3

    @abc.abstractmethod
    def forward(self, x: np.ndarray) -> EmbeddingVector:
        ...

    @abc.abstractmethod
    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        ...

    @property
    def embedding_dim(self) -> int | None:
        if self.expected_input == "any":
            return None
        return self.embedding_dim_for(self.expected_input)

    def embedding_dim_for(self, shape) -> int:
        return len(self.forward(np.zeros(tuple(shape))))

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 3:
            raise InvalidArgumentError(f"expected a 3-D image, got shape {x.shape}")
        if self.expected_input == "any":
            if x.shape[2] != self.channels:
                raise InvalidArgumentError(f"expected {self.channels} channels, got {x.shape[2]}")
        elif tuple(x.shape) != tuple(self.expected_input):
            raise InvalidArgumentError(f"expected input of shape {tuple(self.expected_input)}, got {x.shape}")

    def distortion_value_and_grad(self, x_adv: np.ndarray, phi_clean: EmbeddingVector):
        """Return ``(||phi(x_adv) - phi_clean||^2, gradient wrt x_adv)``."""
        phi_adv = self.forward(x_adv)
        residual = phi_adv.data - phi_clean.data
        value = float(np.dot(residual, residual))
        return value, self.vjp(x_adv, 2.0 * residual)


def forward(oracle: EncoderOracle, x: np.ndarray) -> EmbeddingVector:
    return oracle.forward(x)


def vjp(oracle: EncoderOracle, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    return oracle.vjp(x, cotangent)


def distortion_gradient(oracle: EncoderOracle, x: np.ndarray, x_adv: np.ndarray) -> np.ndarray:
    """Gradient of ``||phi(x_adv) - phi(x)||^2`` with respect to ``x_adv``."""
    if np.shape(x) != np.shape(x_adv):
        raise InvalidArgumentError(f"shape mismatch: {np.shape(x)} vs {np.shape(x_adv)}")
    residual = oracle.forward(x_adv).data - oracle.forward(x).data
    return oracle.vjp(x_adv, 2.0 * residual)
