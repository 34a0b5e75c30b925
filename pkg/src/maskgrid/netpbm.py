"""Minimal binary NetPBM reader/writer: P6 (PPM) images, P5 (PGM) masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(raw: bytes):
    """Yield header tokens, skipping whitespace and # comments."""
    i = 0
    while True:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        if start == i:
            return
        yield raw[start:i].decode("ascii"), i


def _read_header(raw: bytes, magic: str) -> tuple[int, int, int]:
    toks = _tokens(raw)
    got, _ = next(toks)
    if got != magic:
        raise ValueError(f"expected {magic} file, got magic {got!r}")
    (w, _), (h, _), (maxval, end) = next(toks), next(toks), next(toks)
    if int(maxval) != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return int(w), int(h), end + 1


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    """Write a (3, H, W) uint8 or [-1, 1] float image as binary PPM."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = to_u8(arr)
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.transpose(1, 2, 0).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) uint8 array."""
    raw = Path(path).read_bytes()
    w, h, start = _read_header(raw, "P6")
    data = np.frombuffer(raw, dtype=np.uint8, count=3 * h * w, offset=start)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    arr = np.asarray(gray, dtype=np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, start = _read_header(raw, "P5")
    return np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=start).reshape(h, w)


def to_u8(img: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float image to uint8 via the 127.5 scale."""
    return np.clip(np.round((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_float(img: np.ndarray) -> np.ndarray:
    """Map a uint8 image to [-1, 1] float32."""
    return (np.asarray(img).astype(np.float32) / 127.5) - 1.0
