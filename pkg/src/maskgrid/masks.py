"""Binary visibility masks and mask-aware convolution algebra.

A mask marks each pixel visible (1) or missing (0). Two convolution
variants consume it:

* partial convolution: windows are renormalized by their visible count
  and the mask dilates outward one kernel support per layer;
* restrictive convolution: windows additionally require a visible
  fraction of at least ``alpha`` and the mask is never updated at the
  convolution itself -- only the explicit downsampling rule coarsens it.

Repeated alpha-thresholded 2x downsampling turns the pixel mask into the
token-grid mask that decides which latent cells the encoder may label.
"""

from __future__ import annotations

import numpy as np

from . import netpbm
from . import tensor as T
from .tensor import Tensor


class MaskGrid:
    """An (H, W) grid of {0, 1} visibility flags, 1 = visible."""

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be strictly 0 or 1")
        self.values = arr.astype(np.uint8)

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "MaskGrid":
        return cls(np.ones(shape, dtype=np.uint8))

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "MaskGrid":
        return cls(np.zeros(shape, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def visible_fraction(self) -> float:
        return float(self.values.mean())

    def complement(self) -> "MaskGrid":
        return MaskGrid(1 - self.values)

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskGrid) and np.array_equal(self.values, other.values)

    def save_pgm(self, path) -> None:
        netpbm.write_pgm(path, self.values * np.uint8(255))

    @classmethod
    def load_pgm(cls, path) -> "MaskGrid":
        raw = netpbm.read_pgm(path)
        return cls((raw >= 128).astype(np.uint8))


class MaskPyramid:
    """Masks from input resolution down to the token grid, halving each level."""

    def __init__(self, levels: list[MaskGrid], alpha: float):
        for a, b in zip(levels, levels[1:]):
            if (a.shape[0] != 2 * b.shape[0]) or (a.shape[1] != 2 * b.shape[1]):
                raise ValueError(
                    f"pyramid levels must halve: {a.shape} -> {b.shape}"
                )
        self.levels = levels
        self.alpha = alpha

    @property
    def token_mask(self) -> MaskGrid:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)


# -- window accounting -------------------------------------------------------


def _window_sums(plane: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Sum of `plane` over every k x k window (zero padding outside)."""
    p = np.pad(plane.astype(np.float32), ((padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(p, (k, k))
    return win[::stride, ::stride].sum(axis=(2, 3))


def partial_factors(
    mask: np.ndarray, k: int, stride: int = 1, padding: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window (1/visible-count, any-visible) planes for partial conv."""
    if padding is None:
        padding = (k - 1) // 2
    vis = _window_sums(mask, k, stride, padding)
    keep = (vis > 0).astype(np.float32)
    with np.errstate(divide="ignore"):
        scale = np.where(vis > 0, 1.0 / np.maximum(vis, 1e-12), 0.0).astype(np.float32)
    return scale, keep


def restrictive_factors(
    mask: np.ndarray, k: int, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window (1/visible-count, fraction >= alpha) planes.

    The fraction denominator counts only in-bounds window cells, so a
    fully visible image keeps ratio 1 at its borders.
    """
    padding = (k - 1) // 2
    vis = _window_sums(mask, k, 1, padding)
    area = _window_sums(np.ones_like(mask), k, 1, padding)
    keep = (vis / area >= alpha - 1e-7).astype(np.float32)
    with np.errstate(divide="ignore"):
        scale = np.where(vis > 0, 1.0 / np.maximum(vis, 1e-12), 0.0).astype(np.float32)
    return scale * keep, keep


def _masked_conv(
    x: Tensor,
    mask: np.ndarray,
    weight: Tensor,
    bias: Tensor | None,
    stride: int,
    padding: int,
    scale: np.ndarray,
    keep: np.ndarray,
) -> Tensor:
    raw = T.conv2d(x * Tensor(mask[None, None]), weight, stride=stride, padding=padding)
    out = raw * Tensor(scale[None, None])
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out * Tensor(keep[None, None])


def _check_extents(x: Tensor, mask: MaskGrid) -> None:
    if x.ndim != 4:
        raise ValueError(f"input must be 4-d NCHW, got shape {x.shape}")
    if x.shape[2:] != mask.shape:
        raise ValueError(
            f"mask extents {mask.shape} do not match input spatial extents {x.shape[2:]}"
        )


def partial_conv(
    x: Tensor,
    mask: MaskGrid,
    weight: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: int | None = None,
) -> tuple[Tensor, MaskGrid]:
    """Visible-count-normalized convolution plus the dilated output mask.

    Windows with any visible pixel produce ``W^T(x * m) / count + b``;
    all-masked windows produce exactly zero. The returned mask is 1
    wherever the window saw at least one visible pixel.
    """
    _check_extents(x, mask)
    k = weight.shape[2]
    if padding is None:
        padding = (k - 1) // 2
    scale, keep = partial_factors(mask.values, k, stride, padding)
    out = _masked_conv(x, mask.values, weight, bias, stride, padding, scale, keep)
    return out, MaskGrid(keep.astype(np.uint8))


def restrictive_conv(
    x: Tensor,
    mask: MaskGrid,
    weight: Tensor,
    bias: Tensor | None,
    alpha: float,
) -> Tensor:
    """Partial convolution gated by window visible fraction >= alpha.

    Same-size output (stride 1); the input mask is left untouched, so
    features never crawl into mostly-masked regions across layers.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    _check_extents(x, mask)
    k = weight.shape[2]
    scale, keep = restrictive_factors(mask.values, k, alpha)
    return _masked_conv(x, mask.values, weight, bias, 1, (k - 1) // 2, scale, keep)


def masked_downsample(x: Tensor, mask: np.ndarray, alpha: float) -> Tensor:
    """2x feature downsampling by visible-count mean, gated at alpha.

    The feature-space counterpart of the mask downsampling rule: each
    2x2 cell averages its visible entries and is zeroed when the visible
    fraction falls below alpha.
    """
    n, c, h, w = x.shape
    m = mask.astype(np.float32).reshape(h // 2, 2, w // 2, 2)
    counts = m.sum(axis=(1, 3))
    keep = (counts / 4.0 >= alpha - 1e-7).astype(np.float32)
    with np.errstate(divide="ignore"):
        scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1e-12), 0.0) * keep
    xm = x * Tensor(mask[None, None].astype(np.float32))
    pooled = T.sum_(xm.reshape(n, c, h // 2, 2, w // 2, 2), axis=(3, 5))
    return pooled * Tensor(scale[None, None].astype(np.float32))


def downsample_mask(mask: MaskGrid, alpha: float, window: int = 2) -> MaskGrid:
    """Coarsen: a cell stays visible iff its window's visible fraction >= alpha."""
    h, w = mask.shape
    if h % window or w % window:
        raise ValueError(
            f"mask extents {mask.shape} not divisible by window {window}"
        )
    m = mask.values.reshape(h // window, window, w // window, window)
    frac = m.sum(axis=(1, 3)) / float(window * window)
    return MaskGrid((frac >= alpha - 1e-7).astype(np.uint8))


def build_pyramid(mask: MaskGrid, alpha: float, stages: int) -> MaskPyramid:
    """Apply the downsampling rule `stages` times; last level is the token mask."""
    levels = [mask]
    for _ in range(stages):
        levels.append(downsample_mask(levels[-1], alpha))
    return MaskPyramid(levels, alpha)


# -- mask generation ----------------------------------------------------------

# Free-form generator knobs (at 64x64 scale): strokes are random walks of
# 6-20 segments, 2-4 px per segment, thickness 2-5; rectangles cover up to
# ~12% of the image each. Shapes are stamped until the drawn-area target
# (small: 10-30%, large: 40-70%) is reached.
STROKE_SEGMENTS = (6, 20)
STROKE_STEP = (2.0, 4.0)
STROKE_THICKNESS = (2, 5)
RECT_FRAC = (0.15, 0.35)
SMALL_TARGET = (0.10, 0.30)
LARGE_TARGET = (0.40, 0.70)

MASK_KINDS = ("small-random", "large-random", "box80", "custom-box")


def _stamp_disk(canvas: np.ndarray, cy: float, cx: float, r: int) -> None:
    h, w = canvas.shape
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1][(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0


def _stamp_stroke(canvas: np.ndarray, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    heading = rng.uniform(0, 2 * np.pi)
    thickness = int(rng.integers(STROKE_THICKNESS[0], STROKE_THICKNESS[1] + 1))
    for _ in range(int(rng.integers(STROKE_SEGMENTS[0], STROKE_SEGMENTS[1] + 1))):
        heading += rng.uniform(-0.9, 0.9)
        step = rng.uniform(*STROKE_STEP)
        y = float(np.clip(y + step * np.sin(heading), 0, h - 1))
        x = float(np.clip(x + step * np.cos(heading), 0, w - 1))
        _stamp_disk(canvas, y, x, thickness)


def _stamp_rect(canvas: np.ndarray, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    rh = int(rng.uniform(*RECT_FRAC) * h)
    rw = int(rng.uniform(*RECT_FRAC) * w)
    y = int(rng.integers(0, max(1, h - rh)))
    x = int(rng.integers(0, max(1, w - rw)))
    canvas[y : y + rh, x : x + rw] = 0


def _box_mask(shape: tuple[int, int], frac: float) -> np.ndarray:
    h, w = shape
    bh, bw = int(frac * h), int(frac * w)
    canvas = np.ones(shape, dtype=np.uint8)
    y, x = (h - bh) // 2, (w - bw) // 2
    canvas[y : y + bh, x : x + bw] = 0
    return canvas


def generate_mask(
    kind: str,
    shape: tuple[int, int],
    seed: int,
    box_frac: float | None = None,
) -> MaskGrid:
    """Draw a visibility mask of the named kind, deterministically from `seed`."""
    rng = np.random.default_rng(seed)
    if kind == "box80":
        return MaskGrid(_box_mask(shape, 0.8))
    if kind == "custom-box":
        if box_frac is None:
            raise ValueError("custom-box requires box_frac")
        return MaskGrid(_box_mask(shape, box_frac))
    if kind not in ("small-random", "large-random"):
        raise ValueError(f"unknown mask kind {kind!r}, expected one of {MASK_KINDS}")
    lo, hi = SMALL_TARGET if kind == "small-random" else LARGE_TARGET
    target = rng.uniform(lo, hi)
    canvas = np.ones(shape, dtype=np.uint8)
    while 1.0 - canvas.mean() < target:
        if rng.random() < 0.6:
            _stamp_stroke(canvas, rng)
        else:
            _stamp_rect(canvas, rng)
    return MaskGrid(canvas)
