"""Quality and diversity metrics computed in the trained VQ feature space.

Stand-ins, not the usual pretrained-network metrics: distances come from
the in-repo VQ encoder, so absolute values are only comparable between
runs of this pipeline. Every report header says so.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .vq import VQArtifacts, encode_features

DISTANCE_NAME = "vq-encoder feature L2 (in-repo substitute for a pretrained perceptual metric)"


def pooled_features(vq: VQArtifacts, images: np.ndarray) -> np.ndarray:
    """Spatially pooled VQ-encoder features, one (n_z,) row per image."""
    feats = encode_features(vq, images)
    return feats.mean(axis=(2, 3))


def frechet_distance(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """Frechet distance between two Gaussians (mu, cov)."""
    diff = mu1 - mu2
    with np.errstate(invalid="ignore", divide="ignore"):
        covmean, _ = scipy.linalg.sqrtm(cov1 @ cov2, disp=False)
        if not np.isfinite(covmean).all():
            jitter = 1e-6 * np.eye(cov1.shape[0])
            covmean, _ = scipy.linalg.sqrtm((cov1 + jitter) @ (cov2 + jitter), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(cov1 + cov2 - 2.0 * covmean))


def gaussian_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return rows.mean(axis=0), np.cov(rows, rowvar=False)


def fid_proxy(vq: VQArtifacts, real: np.ndarray, generated: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of pooled VQ features."""
    mu1, c1 = gaussian_stats(pooled_features(vq, real).astype(np.float64))
    mu2, c2 = gaussian_stats(pooled_features(vq, generated).astype(np.float64))
    return frechet_distance(mu1, c1, mu2, c2)


def sample_diversity(
    vq: VQArtifacts, samples: np.ndarray, missing_cells: np.ndarray
) -> float:
    """Mean pairwise feature distance between samples over missing cells.

    `samples` is (S, 3, H, W); the distance between two samples is the
    mean over missing token cells of the euclidean distance between
    their VQ feature vectors at that cell.
    """
    if len(samples) < 2:
        raise ValueError(f"diversity needs >= 2 samples, got {len(samples)}")
    cells = np.asarray(missing_cells, dtype=bool)
    if not cells.any():
        return 0.0
    feats = encode_features(vq, samples)[:, :, cells]  # (S, n_z, M)
    total = 0.0
    pairs = 0
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            d = np.sqrt(((feats[i] - feats[j]) ** 2).sum(axis=0))
            total += float(d.mean())
            pairs += 1
    return total / pairs


def boundary_jump(image: np.ndarray, mask_values: np.ndarray) -> float:
    """Mean absolute pixel step across visible/masked 4-adjacent pairs."""
    img = np.asarray(image)
    m = np.asarray(mask_values, dtype=bool)
    total = 0.0
    count = 0
    for (sa, sb) in (
        ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
        ((slice(1, None), slice(None)), (slice(None, -1), slice(None))),
    ):
        edge = m[sa] != m[sb]
        if edge.any():
            diff = np.abs(img[(slice(None),) + sa] - img[(slice(None),) + sb])
            total += float(diff[:, edge].sum())
            count += int(edge.sum()) * img.shape[0]
    return total / max(count, 1)


@dataclass
class EvalReport:
    setting: str
    n_images: int
    n_samples: int
    seed: int
    mse_visible: float
    mse_masked: float
    fid_proxy: float
    diversity_mean: float
    diversity_std: float
    distance_name: str = DISTANCE_NAME
    manifest: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"# distance: {self.distance_name}",
            f"setting={self.setting}",
            f"n_images={self.n_images}",
            f"n_samples={self.n_samples}",
            f"seed={self.seed}",
            f"mse_visible={self.mse_visible:.6f}",
            f"mse_masked={self.mse_masked:.6f}",
            f"fid_proxy={self.fid_proxy:.6f}",
            f"diversity_mean={self.diversity_mean:.6f}",
            f"diversity_std={self.diversity_std:.6f}",
        ]
        return "\n".join(lines) + "\n"
