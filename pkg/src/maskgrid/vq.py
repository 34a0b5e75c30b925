"""Discrete latent codebook and the small vector-quantized autoencoder.

The autoencoder is trained once on complete images; its encoder supplies
ground-truth token labels for the later stages and its codebook maps
labels back to feature vectors everywhere downstream.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .blocks import ImageGenerator, ResBlock
from .nn import Adam, Conv2d, LayerNorm, Module
from .tensor import Tensor

log = logging.getLogger(__name__)


class Codebook:
    """K learned embedding rows of n_z channels; label K is the MASK sentinel."""

    def __init__(self, embeddings: Tensor):
        self.embeddings = embeddings

    @classmethod
    def initialized(cls, K: int, n_z: int, rng: np.random.Generator) -> "Codebook":
        return cls(Tensor(rng.uniform(-1.0 / K, 1.0 / K, size=(K, n_z)), requires_grad=True))

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_z(self) -> int:
        return self.embeddings.shape[1]

    @property
    def mask_label(self) -> int:
        return self.K


class TokenGrid:
    """An (h, w) grid of integer labels; cells equal to K are missing (MASK)."""

    def __init__(self, labels: np.ndarray, mask_label: int):
        labels = np.asarray(labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ValueError(f"token grid must be 2-d, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() > mask_label:
            raise ValueError(
                f"labels must lie in [0, {mask_label}] (MASK={mask_label}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        self.labels = labels
        self.mask_label = mask_label

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def visible_mask(self) -> np.ndarray:
        return self.labels != self.mask_label

    def missing_mask(self) -> np.ndarray:
        return self.labels == self.mask_label

    def missing_count(self) -> int:
        return int(self.missing_mask().sum())

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.labels.copy(), self.mask_label)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenGrid)
            and self.mask_label == other.mask_label
            and np.array_equal(self.labels, other.labels)
        )

    def to_text(self) -> str:
        h, w = self.shape
        rows = [
            " ".join("M" if v == self.mask_label else str(int(v)) for v in row)
            for row in self.labels
        ]
        return f"{h} {w}\n" + "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, mask_label: int) -> "TokenGrid":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        h, w = (int(v) for v in lines[0].split())
        labels = np.array(
            [
                [mask_label if tok == "M" else int(tok) for tok in ln.split()]
                for ln in lines[1 : 1 + h]
            ],
            dtype=np.int32,
        )
        if labels.shape != (h, w):
            raise ValueError(f"token grid body {labels.shape} != header ({h}, {w})")
        return cls(labels, mask_label)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, mask_label: int) -> "TokenGrid":
        return cls.from_text(Path(path).read_text(), mask_label)


def nearest_labels(features: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Argmin-distance labels for (..., n_z) feature rows; ties take the lowest index."""
    flat = features.reshape(-1, features.shape[-1])
    d = (
        (flat**2).sum(axis=1, keepdims=True)
        - 2.0 * flat @ embeddings.T
        + (embeddings**2).sum(axis=1)
    )
    return d.argmin(axis=1).astype(np.int32).reshape(features.shape[:-1])


def quantize(features, codebook: Codebook) -> TokenGrid:
    """Assign each (n_z, h, w) cell the label of its nearest codebook row."""
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim != 3 or arr.shape[0] != codebook.n_z:
        raise ValueError(
            f"expected ({codebook.n_z}, h, w) features, got shape {arr.shape}"
        )
    labels = nearest_labels(arr.transpose(1, 2, 0), codebook.embeddings.data)
    return TokenGrid(labels, codebook.mask_label)


def lookup(
    grid: TokenGrid,
    codebook: Codebook,
    mask_embedding: Tensor | None = None,
) -> Tensor:
    """Map a token grid to its (n_z, h, w) feature map.

    MASK cells are rejected unless a learned `mask_embedding` row is
    supplied to stand in for them.
    """
    labels = grid.labels
    if grid.missing_count() and mask_embedding is None:
        raise ValueError(
            f"grid contains {grid.missing_count()} MASK cells; "
            "pass mask_embedding to look them up"
        )
    if mask_embedding is not None:
        table = T.concat([codebook.embeddings, mask_embedding.reshape(1, -1)], axis=0)
    else:
        table = codebook.embeddings
    return T.gather_rows(table, labels).transpose((2, 0, 1))


def lookup_batch(labels: np.ndarray, codebook: Codebook) -> Tensor:
    """Vectorized lookup of (B, h, w) label arrays to (B, n_z, h, w)."""
    return T.gather_rows(codebook.embeddings, labels).transpose((0, 3, 1, 2))


class VQEncoder(Module):
    """Plain conv encoder from images to pre-quantization feature grids."""

    def __init__(self, n_z: int, rng: np.random.Generator, base: int = 16):
        super().__init__()
        self.stem = Conv2d(3, base, 3, rng, stride=2)
        self.block1 = ResBlock(base, 2 * base, rng)
        self.down2 = Conv2d(2 * base, 2 * base, 3, rng, stride=2)
        self.block2 = ResBlock(2 * base, 4 * base, rng)
        self.down3 = Conv2d(4 * base, 4 * base, 3, rng, stride=2)
        self.block3 = ResBlock(4 * base, 4 * base, rng)
        self.out_ln = LayerNorm(4 * base, axis=1)
        self.head = Conv2d(4 * base, n_z, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.block1(T.relu(self.stem(x)))
        h = self.block2(T.relu(self.down2(h)))
        h = self.block3(T.relu(self.down3(h)))
        return self.head(self.out_ln(h))


class VQArtifacts:
    """Trained encoder/generator/codebook bundle."""

    def __init__(self, encoder: VQEncoder, generator: ImageGenerator, codebook: Codebook):
        self.encoder = encoder
        self.generator = generator
        self.codebook = codebook

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = {f"vq/encoder/{k}": v for k, v in self.encoder.state_dict().items()}
        entries.update(
            {f"vq/generator/{k}": v for k, v in self.generator.state_dict().items()}
        )
        entries["vq/codebook/embeddings"] = np.array(self.codebook.embeddings.data)
        return entries

    def load_state_entries(self, entries: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict(
            {
                k[len("vq/encoder/") :]: v
                for k, v in entries.items()
                if k.startswith("vq/encoder/")
            }
        )
        self.generator.load_state_dict(
            {
                k[len("vq/generator/") :]: v
                for k, v in entries.items()
                if k.startswith("vq/generator/")
            }
        )
        emb = entries["vq/codebook/embeddings"]
        if emb.shape != self.codebook.embeddings.shape:
            raise ValueError(
                f"codebook extents {emb.shape} != model extents "
                f"{self.codebook.embeddings.shape}"
            )
        self.codebook.embeddings.data = emb.astype(np.float32).copy()


def encode_features(vq: VQArtifacts, images: np.ndarray) -> np.ndarray:
    """Pre-quantization feature grids (B, n_z, h, w) of complete images."""
    with T.no_grad():
        return vq.encoder(Tensor(images)).data


def encode_full(image: np.ndarray, vq: VQArtifacts) -> TokenGrid:
    """Token labels of one complete (3, H, W) image; contains no MASK cells."""
    feats = encode_features(vq, image[None])
    return quantize(feats[0], vq.codebook)


def encode_full_batch(images: np.ndarray, vq: VQArtifacts) -> np.ndarray:
    feats = encode_features(vq, images)
    return nearest_labels(feats.transpose(0, 2, 3, 1), vq.codebook.embeddings.data)


def codebook_usage(vq: VQArtifacts, images: np.ndarray) -> float:
    labels = encode_full_batch(images, vq)
    return len(np.unique(labels)) / vq.codebook.K


def reconstruct(vq: VQArtifacts, images: np.ndarray) -> np.ndarray:
    """Round-trip images through quantized codes and back to pixels."""
    with T.no_grad():
        labels = encode_full_batch(images, vq)
        return vq.generator(lookup_batch(labels, vq.codebook)).data


def _kmeans_rows(rows: np.ndarray, K: int, rng: np.random.Generator, iters: int = 12) -> np.ndarray:
    """Plain Lloyd's iterations; empty clusters re-seed from random rows."""
    centers = rows[rng.choice(len(rows), size=K, replace=len(rows) < K)].copy()
    for _ in range(iters):
        labels = nearest_labels(rows, centers)
        for k in range(K):
            members = rows[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
            else:
                centers[k] = rows[rng.integers(len(rows))]
    return centers


def train_vq(
    images: np.ndarray,
    K: int,
    n_z: int,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    commitment: float = 0.1,
    warmup_frac: float = 0.3,
    log_every: int = 50,
) -> tuple[VQArtifacts, dict]:
    """Train encoder + generator + codebook on complete images.

    The first `warmup_frac` of the steps train the autoencoder without
    quantization; the codebook is then initialized by k-means over the
    warmed encoder's features, so nearly every row starts live. The
    remaining steps use straight-through gradients across the
    quantization point, an L2 pull of codes toward encoder outputs, and
    a weighted commitment pull of the encoder toward its codes.
    """
    if len(images) < batch_size:
        raise ValueError(
            f"dataset of {len(images)} images is smaller than batch size {batch_size}"
        )
    rng = np.random.default_rng(seed)
    enc = VQEncoder(n_z, rng)
    gen = ImageGenerator(n_z, rng)
    codebook = Codebook.initialized(K, n_z, rng)

    opt_nets = Adam(enc.parameters() + gen.parameters(), lr=lr)
    opt_cb = Adam([codebook.embeddings], lr=lr)
    warmup = int(warmup_frac * steps)
    history: list[float] = []
    for step in range(steps):
        if step == warmup:
            probe_count = min(len(images), max(4 * batch_size, 64))
            probe = images[rng.choice(len(images), size=probe_count, replace=False)]
            with T.no_grad():
                feats = enc(Tensor(probe)).data.transpose(0, 2, 3, 1).reshape(-1, n_z)
            codebook.embeddings.data = _kmeans_rows(feats, K, rng).astype(np.float32)
        batch = images[rng.choice(len(images), size=batch_size, replace=False)]
        x = Tensor(batch)
        z_e = enc(x)
        quantized = step >= warmup
        if quantized:
            labels = nearest_labels(
                z_e.data.transpose(0, 2, 3, 1), codebook.embeddings.data
            )
            z_q = lookup_batch(labels, codebook)
            z_in = z_e + (z_q - z_e).detach()
            recon = T.mean((gen(z_in) - x) ** 2)
            cb_loss = T.mean((z_q - z_e.detach()) ** 2)
            commit = T.mean((z_e - z_q.detach()) ** 2)
            loss = recon + cb_loss + commitment * commit
        else:
            loss = recon = T.mean((gen(z_e) - x) ** 2)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"vq training diverged at step {step}")
        opt_nets.zero_grad()
        opt_cb.zero_grad()
        loss.backward()
        opt_nets.step()
        if quantized:
            opt_cb.step()
        history.append(float(recon.data))
        if log_every and step % log_every == 0:
            log.info("vq step %d recon %.4f", step, history[-1])

    vq = VQArtifacts(enc, gen, codebook)
    probe = images[rng.choice(len(images), size=min(64, len(images)), replace=False)]
    recon_mse = float(np.mean((reconstruct(vq, probe) - probe) ** 2))
    report = {
        "recon_history": history,
        "final_recon_mse": recon_mse,
        "codebook_usage": codebook_usage(vq, probe),
    }
    return vq, report
