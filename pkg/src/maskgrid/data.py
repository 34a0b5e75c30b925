"""Procedural training corpora: gradients, flat shapes, value-noise textures.

Images are synthesized as uint8, then mapped to [-1, 1] floats, so a
corpus written to disk and read back reproduces the training data
bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import netpbm

KINDS = ("gradients", "shapes", "textures", "mixed")
_CLASSES = ("gradients", "shapes", "textures")


def _gradient_image(extent: int, rng: np.random.Generator) -> np.ndarray:
    c0 = rng.uniform(0, 255, size=3)
    c1 = rng.uniform(0, 255, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:extent, 0:extent] / (extent - 1)
    t = (xx * np.cos(theta) + yy * np.sin(theta) + 1.0) / 2.0
    img = c0[:, None, None] + t[None] * (c1 - c0)[:, None, None]
    return img


def _shape_image(extent: int, rng: np.random.Generator) -> np.ndarray:
    # wide (~2.5 px) anti-aliased edges: soft silhouettes read better at
    # this resolution and keep the corpus block-codable
    edge = 2.5
    img = np.ones((3, extent, extent)) * rng.uniform(0, 255, size=3)[:, None, None]
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0, 255, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2) * extent
        if rng.random() < 0.5:
            a = rng.uniform(0.1, 0.3) * extent
            b = rng.uniform(0.1, 0.3) * extent
            f = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2
            cover = np.clip((1.0 - f) * (max(a, b) / edge), 0.0, 1.0)
        else:
            hh = rng.uniform(0.1, 0.3) * extent
            ww = rng.uniform(0.1, 0.3) * extent
            dy = hh - np.abs(yy - cy)
            dx = ww - np.abs(xx - cx)
            cover = np.clip((np.minimum(dy, dx) + edge / 2) / edge, 0.0, 1.0)
        img = img * (1.0 - cover[None]) + color[:, None, None] * cover[None]
    return img


def _bilerp_grid(coarse: np.ndarray, extent: int) -> np.ndarray:
    n = coarse.shape[0]
    pos = np.linspace(0, n - 1, extent)
    i0 = np.clip(pos.astype(int), 0, n - 2)
    frac = pos - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None] + rows[:, i0 + 1] * frac[None]
    return cols


def _texture_image(extent: int, rng: np.random.Generator) -> np.ndarray:
    # octaves stay coarse relative to the token grid so the corpus is
    # representable by block-level codes
    noise = np.zeros((extent, extent))
    for scale, weight in ((2, 0.5), (4, 0.35), (8, 0.15)):
        noise += weight * _bilerp_grid(rng.random((scale + 1, scale + 1)), extent)
    noise = (noise - noise.min()) / max(np.ptp(noise), 1e-9)
    c0 = rng.uniform(0, 255, size=3)
    c1 = rng.uniform(0, 255, size=3)
    return c0[:, None, None] + noise[None] * (c1 - c0)[:, None, None]


_MAKERS = {
    "gradients": _gradient_image,
    "shapes": _shape_image,
    "textures": _texture_image,
}


def generate_images(
    kind: str, count: int, extent: int, seed: int
) -> tuple[np.ndarray, list[str]]:
    """Deterministic (count, 3, extent, extent) float32 corpus in [-1, 1].

    `mixed` cycles through the three classes so counts stay uniform.
    Also returns the per-image class names.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}, expected one of {KINDS}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, extent, extent), dtype=np.float32)
    classes: list[str] = []
    for i in range(count):
        cls = _CLASSES[i % len(_CLASSES)] if kind == "mixed" else kind
        raw = _MAKERS[cls](extent, rng)
        images[i] = netpbm.to_float(netpbm.to_u8(raw / 127.5 - 1.0))
        classes.append(cls)
    return images, classes


def make_dataset(kind: str, count: int, extent: int, seed: int, out_dir: str | Path) -> list[Path]:
    """Write a PPM corpus to `out_dir`; returns the file paths in order."""
    images, classes = generate_images(kind, count, extent, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (img, cls) in enumerate(zip(images, classes)):
        path = out / f"{i:05d}_{cls}.ppm"
        netpbm.write_ppm(path, img)
        paths.append(path)
    return paths


def load_dataset(dir_path: str | Path) -> np.ndarray:
    """Read every .ppm in the directory (sorted) into a [-1, 1] float array."""
    paths = sorted(Path(dir_path).glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm images under {dir_path}")
    return np.stack([netpbm.to_float(netpbm.read_ppm(p)) for p in paths])
