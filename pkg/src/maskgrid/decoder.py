"""Composition decoder: partial-image features fused with token features.

A partial-convolution encoder propagates smooth features from the visible
pixels into the holes; at the token grid those features are averaged with
the looked-up token features inside the holes, passed through intact at
visible cells, and decoded by a convolutional generator. Training is
adversarial with a gradient penalty on the discriminator plus a pixel +
feature reconstruction term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .blocks import ImageGenerator
from .masks import MaskGrid, build_pyramid, partial_factors
from .nn import Adam, Conv2d, Linear, Module
from .tensor import Tensor
from .vq import VQArtifacts, encode_full_batch, lookup_batch

log = logging.getLogger(__name__)


class PConv2d(Module):
    """Partial convolution: count-normalized windows, dilating mask update."""

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
    ):
        super().__init__()
        std = float(np.sqrt(2.0 / (cin * k * k)))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.k = k
        self.stride = stride

    def forward(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        pad = (self.k - 1) // 2
        scale, keep = partial_factors(mask, self.k, self.stride, pad)
        out = T.conv2d(
            x * Tensor(mask[None, None].astype(np.float32)),
            self.weight,
            stride=self.stride,
            padding=pad,
        )
        out = (out * Tensor(scale[None, None]) + self.bias.reshape(1, -1, 1, 1)) * Tensor(
            keep[None, None]
        )
        return out, keep.astype(np.uint8)


class PartialEncoder(Module):
    """Stack of partial convolutions down to token-grid resolution."""

    def __init__(self, n_z: int, rng: np.random.Generator, base: int = 16):
        super().__init__()
        self.c1 = PConv2d(3, base, 3, rng, stride=2)
        self.c2 = PConv2d(base, 2 * base, 3, rng, stride=2)
        self.c3 = PConv2d(2 * base, 4 * base, 3, rng, stride=2)
        self.c4 = PConv2d(4 * base, 4 * base, 3, rng)
        self.head = PConv2d(4 * base, n_z, 1, rng)

    def forward(self, x: Tensor, mask: MaskGrid) -> Tensor:
        h, m = self.c1(x, mask.values)
        h, m = self.c2(T.relu(h), m)
        h, m = self.c3(T.relu(h), m)
        h, m = self.c4(T.relu(h), m)
        h, _ = self.head(h, m)
        return h


class Discriminator(Module):
    """Four strided conv stages to a single real/fake logit per image."""

    def __init__(self, rng: np.random.Generator, base: int = 16, image_size: int = 64):
        super().__init__()
        self.c1 = Conv2d(3, base, 3, rng, stride=2)
        self.c2 = Conv2d(base, 2 * base, 3, rng, stride=2)
        self.c3 = Conv2d(2 * base, 4 * base, 3, rng, stride=2)
        self.c4 = Conv2d(4 * base, 4 * base, 3, rng, stride=2)
        self.fc = Linear(4 * base * (image_size // 16) ** 2, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.c1(x))
        h = T.leaky_relu(self.c2(h))
        h = T.leaky_relu(self.c3(h))
        h = T.leaky_relu(self.c4(h))
        return self.fc(h.reshape(h.shape[0], -1))


class ComposerNet(Module):
    """Partial encoder + generator + discriminator, with the mask policy."""

    def __init__(
        self,
        n_z: int,
        alpha: float,
        stages: int,
        rng: np.random.Generator,
        image_size: int = 64,
    ):
        super().__init__()
        self.alpha = alpha
        self.stages = stages
        self.e_prt = PartialEncoder(n_z, rng)
        self.gen = ImageGenerator(n_z, rng)
        self.disc = Discriminator(rng, image_size=image_size)

    def generator_parameters(self) -> list[Tensor]:
        return self.e_prt.parameters() + self.gen.parameters()


def compose(z: Tensor, partial_feats: Tensor, token_mask) -> Tensor:
    """Fuse token features with propagated partial features.

    Missing cells ((1 - m)) average the two sources; visible cells (m)
    pass the partial features through untouched.
    """
    m = token_mask.values if isinstance(token_mask, MaskGrid) else np.asarray(token_mask)
    m = m.astype(np.float32)
    while m.ndim < z.ndim:
        m = m[None]
    if z.shape != partial_feats.shape:
        raise ValueError(
            f"feature extents differ: tokens {z.shape} vs partial {partial_feats.shape}"
        )
    if z.shape[-2:] != m.shape[-2:]:
        raise ValueError(
            f"token mask extents {m.shape[-2:]} != feature extents {z.shape[-2:]}"
        )
    mt = Tensor(m)
    return (1.0 - mt) * (z + partial_feats) * 0.5 + mt * partial_feats


def decode(
    image_masked: np.ndarray,
    mask: MaskGrid,
    z: Tensor,
    nets: ComposerNet,
) -> Tensor:
    """Complete one (3, H, W) partial image given its token feature map."""
    pyramid = build_pyramid(mask, nets.alpha, nets.stages)
    single = np.asarray(image_masked).ndim == 3
    x = Tensor(np.asarray(image_masked)[None] if single else image_masked)
    if z.ndim == 3:
        z = z.reshape(1, *z.shape)
    with T.no_grad():
        feats = nets.e_prt(x, mask)
        fused = compose(z, feats, pyramid.token_mask)
        out = nets.gen(fused)
    return out.reshape(out.shape[1:]) if single else out


@dataclass
class DecoderLosses:
    l_g: Tensor
    l_d: Tensor
    r1: Tensor
    l_p: Tensor
    l_decode: Tensor


def r1_penalty(disc: Discriminator, real: np.ndarray) -> Tensor:
    """Mean squared gradient norm of the discriminator at real inputs.

    Differentiating this w.r.t. the discriminator weights requires a
    graph over the gradient itself, hence create_graph.
    """
    leaf = Tensor(np.asarray(real, dtype=np.float32), requires_grad=True)
    logits = disc(leaf)
    (g,) = T.grad(logits.sum(), [leaf], create_graph=True)
    return T.mean(T.sum_(g * g, axis=(1, 2, 3)))


def perceptual_term(x: Tensor, x_fake: Tensor, vq: VQArtifacts) -> Tensor:
    """Pixel L1 plus squared distance between frozen-encoder feature maps."""
    pix = T.mean(T.abs_(x_fake - x))
    with T.no_grad():
        ref = vq.encoder(x.detach())
    with nn.frozen(vq.encoder):
        feat = T.mean((vq.encoder(x_fake) - ref) ** 2)
    return pix + feat


def decoder_losses(
    x: np.ndarray,
    x_fake: Tensor,
    disc: Discriminator,
    vq: VQArtifacts,
    r1_weight: float = 0.1,
    perceptual_weight: float = 0.1,
) -> DecoderLosses:
    """Non-saturating adversarial losses with R1 and the reconstruction term.

    l_g = -E[log D(fake)], l_d = -E[log D(real)] - E[log(1 - D(fake))],
    both computed in logit space so extreme discriminator outputs cannot
    overflow the logs.
    """
    xt = Tensor(np.asarray(x, dtype=np.float32))
    logit_fake = disc(x_fake)
    logit_real = disc(xt)
    l_g = T.mean(T.softplus(-logit_fake))
    l_d = T.mean(T.softplus(-logit_real)) + T.mean(T.softplus(logit_fake))
    r1 = r1_penalty(disc, np.asarray(x))
    l_p = perceptual_term(xt, x_fake, vq)
    l_decode = l_g + r1_weight * r1 + perceptual_weight * l_p
    return DecoderLosses(l_g, l_d, r1, l_p, l_decode)


def masked_mse(x: np.ndarray, y: np.ndarray, mask: MaskGrid) -> float:
    """Mean squared error over hole pixels only (all channels, all images)."""
    hole = mask.values == 0
    if not hole.any():
        return 0.0
    diff = (np.asarray(x) - np.asarray(y))[..., hole]
    return float((diff**2).mean())


def visible_mse(x: np.ndarray, y: np.ndarray, mask: MaskGrid) -> float:
    vis = mask.values == 1
    if not vis.any():
        return 0.0
    diff = (np.asarray(x) - np.asarray(y))[..., vis]
    return float((diff**2).mean())


def train_decoder(
    images: np.ndarray,
    vq: VQArtifacts,
    mask_fn,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    alpha: float = 0.5,
    stages: int = 3,
    r1_weight: float = 0.1,
    perceptual_weight: float = 0.1,
    log_every: int = 50,
) -> tuple[ComposerNet, dict]:
    """Alternating generator/discriminator training of the composer.

    Token features come from quantized codes of the complete image, so
    the generator learns to reconstruct given ideal tokens; masks are
    redrawn every step via `mask_fn(seed)`.
    """
    rng = np.random.default_rng(seed)
    nets = ComposerNet(
        vq.codebook.n_z, alpha, stages, rng, image_size=images.shape[-1]
    )
    opt_g = Adam(nets.generator_parameters(), lr=lr)
    opt_d = Adam(nets.disc.parameters(), lr=lr)
    mse_hist: list[float] = []
    acc_hist: list[float] = []
    for step in range(steps):
        idx = rng.choice(len(images), size=batch_size, replace=False)
        x = images[idx]
        mask = mask_fn(int(rng.integers(2**31)))
        pyramid = build_pyramid(mask, alpha, stages)
        x_m = x * mask.values[None, None]
        with T.no_grad():
            labels = encode_full_batch(x, vq)
            z = lookup_batch(labels, vq.codebook).detach()

        feats = nets.e_prt(Tensor(x_m), mask)
        fused = compose(z, feats, pyramid.token_mask)
        x_fake = nets.gen(fused)

        # generator step: adversarial + reconstruction terms
        with nn.frozen(nets.disc):
            l_g = T.mean(T.softplus(-nets.disc(x_fake)))
        l_p = perceptual_term(Tensor(x), x_fake, vq)
        loss_g = l_g + perceptual_weight * l_p
        if not np.isfinite(loss_g.data):
            raise FloatingPointError(f"decoder training diverged at step {step}")
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        # discriminator step on the detached fake
        logit_fake = nets.disc(x_fake.detach())
        logit_real = nets.disc(Tensor(x))
        l_d = T.mean(T.softplus(-logit_real)) + T.mean(T.softplus(logit_fake))
        loss_d = l_d + r1_weight * r1_penalty(nets.disc, x)
        if not np.isfinite(loss_d.data):
            raise FloatingPointError(f"decoder training diverged at step {step}")
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        mse_hist.append(masked_mse(x_fake.data, x, mask))
        acc = 0.5 * (
            float((logit_real.data > 0).mean()) + float((logit_fake.data < 0).mean())
        )
        acc_hist.append(acc)
        if log_every and step % log_every == 0:
            log.info(
                "decoder step %d masked-mse %.4f disc-acc %.2f", step, mse_hist[-1], acc
            )
    return nets, {"masked_mse_history": mse_hist, "disc_accuracy_history": acc_hist}
