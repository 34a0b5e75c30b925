"""Mask-aware encoder from partial images to token-label logits.

Every convolution is restrictive: a window only contributes when its
visible fraction clears the alpha threshold, so hole interiors never
influence any visible token's logits. The mask itself coarsens only at
the explicit 2x downsampling steps, ending in the token-grid mask that
selects which cells the encoder is trained (and trusted) to label.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

from . import nn
from . import tensor as T
from .blocks import ResBlock, SelfAttention2d
from .masks import (
    MaskGrid,
    MaskPyramid,
    build_pyramid,
    masked_downsample,
    restrictive_factors,
)
from .nn import Adam, Conv2d, LayerNorm, Module
from .tensor import Tensor
from .vq import TokenGrid, VQArtifacts, encode_full_batch

log = logging.getLogger(__name__)


class RConv2d(Module):
    """Restrictive 3x3/1x1 convolution; window factors are supplied per call."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        std = float(np.sqrt(2.0 / (cin * k * k)))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.k = k

    def forward(self, x: Tensor, level: "_Level") -> Tensor:
        mask_t, scale, keep = level.factors(self.k)
        out = T.conv2d(x * mask_t, self.weight, stride=1, padding=(self.k - 1) // 2)
        out = out * scale
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out * keep


class _Level:
    """Mask plane of one resolution plus cached per-kernel window factors."""

    def __init__(self, mask: np.ndarray, alpha: float):
        self.mask = mask.astype(np.float32)
        self.alpha = alpha
        self._cache: dict[int, tuple[Tensor, Tensor, Tensor]] = {}

    def factors(self, k: int) -> tuple[Tensor, Tensor, Tensor]:
        if k not in self._cache:
            scale, keep = restrictive_factors(self.mask, k, self.alpha)
            self._cache[k] = (
                Tensor(self.mask[None, None]),
                Tensor(scale[None, None]),
                Tensor(keep[None, None]),
            )
        return self._cache[k]


class RResBlock(Module):
    """Residual block whose convolutions are all restrictive."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(cin, axis=1)
        self.conv1 = RConv2d(cin, cout, 3, rng)
        self.ln2 = LayerNorm(cout, axis=1)
        self.conv2 = RConv2d(cout, cout, 3, rng)
        self.skip = RConv2d(cin, cout, 1, rng, bias=False) if cin != cout else None

    def forward(self, x: Tensor, level: _Level) -> Tensor:
        h = self.conv1(self.ln1(x), level)
        h = self.conv2(T.relu(self.ln2(h)), level)
        s = x if self.skip is None else self.skip(x, level)
        return s + h


class RestrictiveEncoder(Module):
    """Three downsampling stages of restrictive residual blocks.

    Self-attention runs at the two coarsest resolutions; a restrictive
    1x1 head emits per-cell label logits on the token grid, exactly zero
    wherever the token mask is 0.
    """

    def __init__(
        self,
        K: int,
        alpha: float,
        rng: np.random.Generator,
        channels: tuple[int, int, int] = (32, 64, 128),
        heads: int = 4,
    ):
        super().__init__()
        self.K = K
        self.alpha = alpha
        self.stages = len(channels)
        c1, c2, c3 = channels
        self.s1a = RResBlock(3, c1, rng)
        self.s1b = RResBlock(c1, c1, rng)
        self.s2a = RResBlock(c1, c2, rng)
        self.s2b = RResBlock(c2, c2, rng)
        self.s3a = RResBlock(c2, c3, rng)
        self.s3b = RResBlock(c3, c3, rng)
        self.attn_mid = SelfAttention2d(c3, heads, rng)
        self.attn_low = SelfAttention2d(c3, heads, rng)
        self.head = RConv2d(c3, K, 1, rng)

    def forward(self, images: Tensor, mask: MaskGrid) -> tuple[Tensor, MaskPyramid]:
        """Logits (N, K, h, w) plus the mask pyramid used to produce them."""
        if images.ndim != 4:
            raise ValueError(f"expected 4-d NCHW images, got shape {images.shape}")
        if images.shape[2:] != mask.shape:
            raise ValueError(
                f"mask extents {mask.shape} != image spatial extents {images.shape[2:]}"
            )
        pyramid = build_pyramid(mask, self.alpha, self.stages)
        levels = [_Level(m.values, self.alpha) for m in pyramid.levels]

        x = images * Tensor(levels[0].mask[None, None])
        x = self.s1b(self.s1a(x, levels[0]), levels[0])
        x = masked_downsample(x, levels[0].mask, self.alpha)
        x = self.s2b(self.s2a(x, levels[1]), levels[1])
        x = masked_downsample(x, levels[1].mask, self.alpha)
        x = self.s3b(self.s3a(x, levels[2]), levels[2])
        x = self.attn_mid(x)
        x = masked_downsample(x, levels[2].mask, self.alpha)
        x = self.attn_low(x)
        logits = self.head(x, levels[3])
        return logits, pyramid


class PlainEncoder(Module):
    """Ablation twin with ordinary convolutions and mean-pool downsampling."""

    def __init__(
        self,
        K: int,
        alpha: float,
        rng: np.random.Generator,
        channels: tuple[int, int, int] = (32, 64, 128),
        heads: int = 4,
    ):
        super().__init__()
        self.K = K
        self.alpha = alpha
        self.stages = len(channels)
        c1, c2, c3 = channels
        self.s1a = ResBlock(3, c1, rng)
        self.s1b = ResBlock(c1, c1, rng)
        self.s2a = ResBlock(c1, c2, rng)
        self.s2b = ResBlock(c2, c2, rng)
        self.s3a = ResBlock(c2, c3, rng)
        self.s3b = ResBlock(c3, c3, rng)
        self.attn_mid = SelfAttention2d(c3, heads, rng)
        self.attn_low = SelfAttention2d(c3, heads, rng)
        self.head = Conv2d(c3, K, 1, rng)

    def forward(self, images: Tensor, mask: MaskGrid) -> tuple[Tensor, MaskPyramid]:
        pyramid = build_pyramid(mask, self.alpha, self.stages)
        x = images * Tensor(mask.values[None, None].astype(np.float32))
        x = nn.avgpool2x(self.s1b(self.s1a(x)))
        x = nn.avgpool2x(self.s2b(self.s2a(x)))
        x = self.attn_mid(self.s3b(self.s3a(x)))
        x = self.attn_low(nn.avgpool2x(x))
        return self.head(x), pyramid


def encode_partial(
    encoder: Module, image: np.ndarray, mask: MaskGrid
) -> tuple[Tensor, MaskPyramid]:
    """Token-label logits (K, h, w) for a single partial (3, H, W) image."""
    with T.no_grad():
        logits, pyramid = encoder(Tensor(np.asarray(image)[None]), mask)
    return logits.reshape(logits.shape[1:]), pyramid


def visible_grid(logits: Tensor, token_mask: MaskGrid, mask_label: int) -> TokenGrid:
    """Argmax labels at visible token cells, MASK everywhere else."""
    labels = logits.data.argmax(axis=0).astype(np.int32)
    labels[token_mask.values == 0] = mask_label
    return TokenGrid(labels, mask_label)


def encoder_loss(logits: Tensor, targets: np.ndarray, token_mask: np.ndarray) -> Tensor:
    """Mean NLL of target labels over visible token cells only.

    `logits` is (N, K, h, w) or (K, h, w); `targets` the matching integer
    labels; `token_mask` the {0,1} token-grid visibility plane.
    """
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        targets = np.asarray(targets)[None]
    K = logits.shape[1]
    sel = np.broadcast_to(np.asarray(token_mask, dtype=bool), targets.shape)
    if not sel.any():
        warnings.warn("encoder_loss: no visible token cells, returning 0")
        return Tensor(0.0)
    flat = logits.transpose((0, 2, 3, 1)).reshape(-1, K)
    rows = flat[sel.reshape(-1)]
    return nn.token_nll(rows, np.asarray(targets).reshape(-1)[sel.reshape(-1)])


def token_accuracy(
    logits: Tensor, targets: np.ndarray, cells: np.ndarray
) -> float:
    """Fraction of selected cells whose argmax logit matches the target label."""
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        targets = np.asarray(targets)[None]
    pred = logits.data.argmax(axis=1)
    sel = np.broadcast_to(np.asarray(cells, dtype=bool), targets.shape)
    if not sel.any():
        return float("nan")
    return float((pred[sel] == np.asarray(targets)[sel]).mean())


def boundary_cells(token_mask: np.ndarray) -> np.ndarray:
    """Visible token cells 4-adjacent to at least one missing cell."""
    m = np.asarray(token_mask, dtype=bool)
    missing = ~m
    near = np.zeros_like(m)
    near[1:, :] |= missing[:-1, :]
    near[:-1, :] |= missing[1:, :]
    near[:, 1:] |= missing[:, :-1]
    near[:, :-1] |= missing[:, 1:]
    return m & near


def train_encoder(
    images: np.ndarray,
    vq: VQArtifacts,
    mask_fn,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    alpha: float = 0.5,
    channels: tuple[int, int, int] = (32, 64, 128),
    plain: bool = False,
    log_every: int = 50,
) -> tuple[Module, dict]:
    """Train an encoder to label visible token cells of randomly masked images.

    `mask_fn(seed) -> MaskGrid` draws the training masks; one mask is
    shared per batch. Targets come from the frozen VQ encoder on the
    complete images.
    """
    rng = np.random.default_rng(seed)
    cls = PlainEncoder if plain else RestrictiveEncoder
    enc = cls(vq.codebook.K, alpha, rng, channels=channels)
    opt = Adam(enc.parameters(), lr=lr)
    targets_all = encode_full_batch(images, vq)
    losses: list[float] = []
    accs: list[float] = []
    for step in range(steps):
        idx = rng.choice(len(images), size=batch_size, replace=False)
        mask = mask_fn(int(rng.integers(2**31)))
        logits, pyramid = enc(Tensor(images[idx]), mask)
        token_mask = pyramid.token_mask.values
        if not token_mask.any():
            continue  # no visible token cells, no supervision this step
        loss = encoder_loss(logits, targets_all[idx], token_mask)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"encoder training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        accs.append(token_accuracy(logits, targets_all[idx], token_mask))
        if log_every and step % log_every == 0:
            log.info("encoder step %d loss %.4f acc %.3f", step, losses[-1], accs[-1])
    return enc, {"loss_history": losses, "accuracy_history": accs}


def miracle_comparison(
    encoder: Module,
    vq: VQArtifacts,
    images: np.ndarray,
    masks: list[MaskGrid],
) -> dict:
    """Side-by-side label accuracy: masked-input path vs full-image path.

    The second path encodes the complete image under an all-visible mask
    and only afterwards restricts its labels to the token mask; it upper
    bounds what the masked-input encoder could recover.
    """
    restrictive_hits = miracle_hits = total = 0
    for image, mask in zip(images, masks):
        target = encode_full_batch(image[None], vq)[0]
        logits, pyramid = encode_partial(encoder, image, mask)
        token_mask = pyramid.token_mask.values.astype(bool)
        full_logits, _ = encode_partial(encoder, image, MaskGrid.full(mask.shape))
        pred_masked = logits.data.argmax(axis=0)
        pred_full = full_logits.data.argmax(axis=0)
        restrictive_hits += int((pred_masked[token_mask] == target[token_mask]).sum())
        miracle_hits += int((pred_full[token_mask] == target[token_mask]).sum())
        total += int(token_mask.sum())
    return {
        "restrictive_accuracy": restrictive_hits / max(1, total),
        "miracle_accuracy": miracle_hits / max(1, total),
        "cells": total,
    }
