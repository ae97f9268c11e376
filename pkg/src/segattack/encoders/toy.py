"""A small seeded convolutional encoder used as a desk-scale stand-in for ViT/Focal backbones."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidArgumentError
from .base import EmbeddingVector, EncoderOracle

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int

    @property
    def padding(self) -> int:
        return (self.kernel - self.stride) // 2


# first two layers overlap (kernel 4, stride 2) so neighbouring cells share pixels;
# padding keeps cell i centred on pixel block i
DEFAULT_ARCH = (ConvLayer(16, 4, 2), ConvLayer(32, 4, 2), ConvLayer(64, 2, 2))
DEFAULT_TAPER = 0.8


def taper_window(layer: ConvLayer, taper: float) -> torch.Tensor:
    """Separable kernel window scaling the taps that reach into neighbouring strides by ``taper``."""
    win = torch.ones(layer.kernel, dtype=torch.float64)
    if layer.padding:
        win[:layer.padding] = taper
        win[-layer.padding:] = taper
    return win[:, None] * win[None, :]


def shifted_softplus(t: torch.Tensor) -> torch.Tensor:
    # smooth everywhere and zero at the origin
    return F.softplus(t) - LOG2


class ToyConvEncoder(EncoderOracle):
    """Random strided conv stack with a smooth nonlinearity between layers.

    Overlapping kernels have their outer taps scaled by ``taper``. The last
    layer is linear. Its output is the spatial feature grid
    ``(h', w', d)`` that :meth:`features` returns; :meth:`forward` flattens it
    in row-major order. Weights are fully determined by ``(arch, seed, gain, taper)``.
    """

    def __init__(self, seed: int = 0, arch=DEFAULT_ARCH, channels: int = 3, gain: float = 2.0,
                 taper: float = DEFAULT_TAPER, dtype=torch.float64, encoder_id: str | None = None):
        if not 2 <= len(arch) <= 4:
            raise InvalidArgumentError("toy encoder needs between 2 and 4 conv layers")
        if any(layer.stride < 2 for layer in arch):
            raise InvalidArgumentError("every toy conv layer must have stride >= 2")
        self.seed = int(seed)
        self.arch = tuple(arch)
        self.channels = channels
        self.gain = gain
        self.taper = taper
        self.dtype = dtype
        self.expected_input = "any"
        self.encoder_id = encoder_id or f"toyconv-s{self.seed}"
        gen = torch.Generator().manual_seed(self.seed)
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        c_in = channels
        for layer in self.arch:
            fan_in = c_in * layer.kernel * layer.kernel
            w = torch.randn(layer.out_channels, c_in, layer.kernel, layer.kernel,
                            generator=gen, dtype=torch.float64) * (gain / math.sqrt(fan_in))
            w = w * taper_window(layer, taper)
            b = 0.1 * torch.randn(layer.out_channels, generator=gen, dtype=torch.float64)
            self.weights.append(w.to(dtype))
            self.biases.append(b.to(dtype))
            c_in = layer.out_channels
        self.feature_dim = c_in

    def descriptor(self) -> dict:
        return {"kind": "toy", "seed": self.seed, "gain": self.gain, "taper": self.taper, "channels": self.channels,
                "arch": [[l.out_channels, l.kernel, l.stride] for l in self.arch]}

    @property
    def patch_size(self) -> int:
        """Pixels per feature cell along each axis."""
        return math.prod(layer.stride for layer in self.arch)

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        for layer in self.arch:
            height = (height + 2 * layer.padding - layer.kernel) // layer.stride + 1
            width = (width + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return height, width

    def embedding_dim_for(self, shape) -> int:
        h, w = self.grid_shape(shape[0], shape[1])
        return h * w * self.feature_dim

    def _to_tensor(self, x: np.ndarray) -> torch.Tensor:
        self.check_input(x)
        h, w = self.grid_shape(x.shape[0], x.shape[1])
        if h < 1 or w < 1:
            raise InvalidArgumentError(f"image {x.shape[:2]} is too small for this encoder")
        return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).to(self.dtype).permute(2, 0, 1)[None]

    def _grid(self, t: torch.Tensor) -> torch.Tensor:
        n = len(self.arch)
        for i, (layer, w, b) in enumerate(zip(self.arch, self.weights, self.biases)):
            t = F.conv2d(t, w, b, stride=layer.stride, padding=layer.padding)
            if i < n - 1:
                t = shifted_softplus(t)
        return t[0].permute(1, 2, 0)  # (h', w', d)

    def features(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self._grid(self._to_tensor(x)).numpy().astype(np.float64)

    def forward(self, x: np.ndarray) -> EmbeddingVector:
        return EmbeddingVector(self.features(x).reshape(-1), self.encoder_id)

    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        t = self._to_tensor(x).requires_grad_(True)
        out = self._grid(t).reshape(-1)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != tuple(out.shape):
            raise InvalidArgumentError(f"cotangent length {cot.shape} != embedding dim {tuple(out.shape)}")
        (g,) = torch.autograd.grad(out, t, grad_outputs=torch.from_numpy(cot).to(self.dtype))
        return g[0].permute(1, 2, 0).numpy().astype(np.float64)

    def distortion_value_and_grad(self, x_adv, phi_clean):
        t = self._to_tensor(x_adv).requires_grad_(True)
        out = self._grid(t).reshape(-1)
        ref = torch.from_numpy(phi_clean.data).to(self.dtype)
        if ref.shape != out.shape:
            raise InvalidArgumentError(f"clean embedding length {tuple(ref.shape)} != {tuple(out.shape)}")
        diff = out - ref
        loss = torch.dot(diff, diff)
        (g,) = torch.autograd.grad(loss, t)
        return float(loss.detach()), g[0].permute(1, 2, 0).numpy().astype(np.float64)
