"""Reusable conv-net blocks: residual blocks, 2-d self-attention, generators."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .nn import Conv2d, LayerNorm, Module
from .tensor import Tensor


class ResBlock(Module):
    """Two 3x3 convolutions with a skip path.

    Layer normalization wraps the first convolution (before and after);
    a 1x1 projection aligns the skip when channel counts change.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(cin, axis=1)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.ln2 = LayerNorm(cout, axis=1)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng, bias=False) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(self.ln1(x))
        h = self.conv2(T.relu(self.ln2(h)))
        s = x if self.skip is None else self.skip(x)
        return s + h


class SelfAttention2d(Module):
    """Multi-head self-attention over the spatial positions of an NCHW map."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.ln = LayerNorm(channels, axis=1)
        self.qkv = Conv2d(channels, 3 * channels, 1, rng)
        self.proj = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        d = c // self.heads
        qkv = self.qkv(self.ln(x))
        qkv = qkv.reshape(n, 3, self.heads, d, h * w).transpose((1, 0, 2, 4, 3))
        out = nn.attention(qkv[0], qkv[1], qkv[2])
        out = out.transpose((0, 1, 3, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class UpBlock(Module):
    """Nearest-neighbor 2x upsampling followed by a residual block."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.block = ResBlock(cin, cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(nn.nearest_upsample2x(x))


class ImageGenerator(Module):
    """Decode a latent feature grid back to a [-1, 1] RGB image.

    Three upsampling stages invert the three downsampling stages of the
    encoders, so an (n_z, 8, 8) grid becomes a (3, 64, 64) image.
    """

    def __init__(self, n_z: int, rng: np.random.Generator, base: int = 16):
        super().__init__()
        self.stem = Conv2d(n_z, 4 * base, 1, rng)
        self.block = ResBlock(4 * base, 4 * base, rng)
        self.up1 = UpBlock(4 * base, 2 * base, rng)
        self.up2 = UpBlock(2 * base, base, rng)
        self.up3 = UpBlock(base, base, rng)
        self.out_ln = LayerNorm(base, axis=1)
        self.out = Conv2d(base, 3, 3, rng)

    def forward(self, z: Tensor) -> Tensor:
        h = self.block(self.stem(z))
        h = self.up3(self.up2(self.up1(h)))
        return T.tanh(self.out(T.relu(self.out_ln(h))))
