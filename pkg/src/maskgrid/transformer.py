"""Bidirectional transformer over token grids.

Input cells are either valid labels or the MASK sentinel; every position
attends to every other, and the head predicts a distribution over valid
labels at each cell. Only MASK cells contribute to the training loss.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

from . import nn
from . import tensor as T
from .nn import Adam, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor
from .vq import TokenGrid, VQArtifacts, encode_full_batch

log = logging.getLogger(__name__)


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, attn_dropout: float = 0.1):
        super().__init__()
        self.heads = heads
        self.attn_dropout = attn_dropout
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng, init_std=0.02)
        self.proj = Linear(dim, dim, rng, init_std=0.02)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng, init_std=0.02)
        self.fc2 = Linear(4 * dim, dim, rng, init_std=0.02)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        n, L, c = x.shape
        d = c // self.heads
        qkv = self.qkv(self.ln1(x))
        qkv = qkv.reshape(n, L, 3, self.heads, d).transpose((2, 0, 3, 1, 4))
        drop = None
        if rng is not None and self.attn_dropout > 0:
            drop = nn.dropout_mask((n, self.heads, L, L), self.attn_dropout, rng)
        att = nn.attention(qkv[0], qkv[1], qkv[2], dropout_mask=drop)
        att = att.transpose((0, 2, 1, 3)).reshape(n, L, c)
        x = x + self.proj(att)
        return x + self.fc2(nn.gelu(self.fc1(self.ln2(x))))


class BidirectionalTransformer(Module):
    """Token + learned positional embeddings, full attention, K-way head.

    The vocabulary has K+1 rows: K valid labels plus the MASK sentinel,
    which gets its own learned input embedding but is never predicted.
    The head starts at zero so an untrained model is exactly uniform.
    """

    def __init__(
        self,
        K: int,
        grid_len: int,
        dim: int,
        layers: int,
        heads: int,
        rng: np.random.Generator,
        attn_dropout: float = 0.1,
        emb_dropout: float = 0.1,
    ):
        super().__init__()
        self.K = K
        self.grid_len = grid_len
        self.emb_dropout = emb_dropout
        self.tok = Embedding(K + 1, dim, rng)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(grid_len, dim)), requires_grad=True)
        self.blocks = [TransformerBlock(dim, heads, rng, attn_dropout) for _ in range(layers)]
        self.ln_f = LayerNorm(dim)
        self.head = Linear(dim, K, rng, zero_init=True)

    def forward(self, labels: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Logits (B, grid_len, K); `rng` enables dropout (training only)."""
        labels = np.asarray(labels)
        if labels.shape[-1] != self.grid_len:
            raise ValueError(
                f"sequence length {labels.shape[-1]} != positional table length {self.grid_len}"
            )
        x = self.tok(labels) + self.pos
        if rng is not None and self.emb_dropout > 0:
            x = x * nn.dropout_mask(x.shape, self.emb_dropout, rng)
        for block in self.blocks:
            x = block(x, rng)
        return self.head(self.ln_f(x))


def predict(grid: TokenGrid, model: BidirectionalTransformer) -> Tensor:
    """Deterministic logits (h*w, K) for one grid; rows for MASK cells matter."""
    flat = grid.labels.reshape(-1)
    with T.no_grad():
        logits = model(flat[None])
    return logits.reshape(len(flat), model.K)


def transformer_loss(logits: Tensor, targets: np.ndarray, missing: np.ndarray) -> Tensor:
    """Mean NLL of target labels over the missing cells only."""
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = np.asarray(targets)[None]
        missing = np.asarray(missing)[None]
    K = logits.shape[-1]
    sel = np.asarray(missing, dtype=bool).reshape(-1)
    if not sel.any():
        warnings.warn("transformer_loss: no missing cells, returning 0")
        return Tensor(0.0)
    rows = logits.reshape(-1, K)[sel]
    return nn.token_nll(rows, np.asarray(targets).reshape(-1)[sel])


def sample_mask_ratio(rng: np.random.Generator, lo: float = 0.15, hi: float = 0.75) -> float:
    return float(rng.uniform(lo, hi))


def mask_cells(
    labels: np.ndarray,
    ratio: float,
    mask_label: int,
    rng: np.random.Generator,
    block: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask ceil(ratio * n) cells of a flat label row; returns (masked, selector).

    Uniform cell choice by default; `block` instead masks one contiguous
    rectangle of approximately the same area on the square grid.
    """
    n = labels.shape[-1]
    count = min(n, int(np.ceil(ratio * n)))
    if block:
        side = int(np.sqrt(n))
        bh = int(np.clip(round(np.sqrt(count)), 1, side))
        bw = int(np.clip(int(np.ceil(count / bh)), 1, side))
        y = int(rng.integers(0, side - bh + 1))
        x = int(rng.integers(0, side - bw + 1))
        sel2d = np.zeros((side, side), dtype=bool)
        sel2d[y : y + bh, x : x + bw] = True
        sel = sel2d.reshape(-1)
    else:
        sel = np.zeros(n, dtype=bool)
        sel[rng.choice(n, size=count, replace=False)] = True
    masked = labels.copy()
    masked[..., sel] = mask_label
    return masked, sel


def train_transformer(
    images: np.ndarray,
    vq: VQArtifacts,
    grid_len: int,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    dim: int = 128,
    layers: int = 4,
    heads: int = 4,
    ratio_range: tuple[float, float] = (0.15, 0.75),
    block_masking: bool = False,
    fixed_grids: np.ndarray | None = None,
    fixed_missing: np.ndarray | None = None,
    stop_below: float | None = None,
    log_every: int = 100,
) -> tuple[BidirectionalTransformer, dict]:
    """Mask random cells of full-image token grids and learn to restore them.

    With `fixed_grids`/`fixed_missing`, trains on exactly those rows and
    masks (overfit mode) and stops early once the loss drops below
    `stop_below`.
    """
    rng = np.random.default_rng(seed)
    model = BidirectionalTransformer(vq.codebook.K, grid_len, dim, layers, heads, rng)
    opt = Adam(model.parameters(), lr=lr)
    if fixed_grids is None:
        all_labels = encode_full_batch(images, vq).reshape(len(images), -1)
    losses: list[float] = []
    for step in range(steps):
        if fixed_grids is not None:
            batch, sel = fixed_grids, fixed_missing
            masked = batch.copy()
            masked[sel] = vq.codebook.mask_label
        else:
            idx = rng.choice(len(all_labels), size=batch_size, replace=False)
            batch = all_labels[idx]
            masked = np.empty_like(batch)
            sel = np.zeros(batch.shape, dtype=bool)
            for b in range(len(batch)):
                ratio = sample_mask_ratio(rng, *ratio_range)
                masked[b], sel[b] = mask_cells(
                    batch[b], ratio, vq.codebook.mask_label, rng, block=block_masking
                )
        logits = model(masked, rng=rng)
        loss = transformer_loss(logits, batch, sel)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"transformer training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if log_every and step % log_every == 0:
            log.info("transformer step %d loss %.4f", step, losses[-1])
        if stop_below is not None and losses[-1] < stop_below:
            break
    return model, {"loss_history": losses}
