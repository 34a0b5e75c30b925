"""Iterative parallel decoding of MASK cells.

Each step draws a candidate label for every remaining MASK cell from the
temperature-scaled predictive distribution, keeps the f(i) most confident
draws, and reverts the rest. The keep counts follow a cosine schedule
that reveals few cells early and many late; the temperature shrinks
geometrically so early steps explore and late steps commit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .transformer import BidirectionalTransformer, predict
from .vq import TokenGrid

log = logging.getLogger(__name__)


def cosine_schedule(missing: int, steps: int) -> list[int]:
    """Per-step keep counts summing exactly to `missing`.

    Cumulative reveals follow ceil(missing * (1 - cos(pi*(i+1)/(2*steps)))),
    clamped to `missing`; when missing >= steps each step is additionally
    floored at one reveal so no step idles.
    """
    if missing < 0:
        raise ValueError(f"missing must be >= 0, got {missing}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    counts = []
    prev = 0
    for i in range(steps):
        c = math.ceil(missing * (1.0 - math.cos(math.pi * (i + 1) / (2 * steps))))
        if missing >= steps:
            c = max(c, i + 1)
        c = min(max(c, prev), missing)
        counts.append(c - prev)
        prev = c
    return counts


@dataclass
class SampleSchedule:
    """Keep counts and temperatures for one decoding run."""

    steps: int
    keep_counts: list[int]
    temperatures: list[float]
    anneal: float

    @classmethod
    def build(cls, missing: int, steps: int, t0: float = 1.0, anneal: float = 0.9) -> "SampleSchedule":
        if t0 <= 0:
            raise ValueError(f"starting temperature must be > 0, got {t0}")
        if not (0.0 < anneal <= 1.0):
            raise ValueError(f"anneal factor must be in (0, 1], got {anneal}")
        counts = cosine_schedule(missing, steps)
        temps = [t0]
        for _ in range(steps - 1):
            temps.append(anneal * temps[-1])
        return cls(steps, counts, temps, anneal)

    @property
    def total(self) -> int:
        return sum(self.keep_counts)

    def validate(self, missing: int) -> None:
        if self.total != missing:
            raise ValueError(
                f"schedule keeps {self.total} cells but grid is missing {missing}"
            )
        if len(self.keep_counts) != self.steps or len(self.temperatures) != self.steps:
            raise ValueError("schedule lists must have one entry per step")
        for a, b in zip(self.temperatures, self.temperatures[1:]):
            if b != self.anneal * a:
                raise ValueError("temperatures must follow t[i+1] = anneal * t[i]")


def _cell_uniform(rng: np.random.SeedSequence, cell: int) -> float:
    child = np.random.SeedSequence(
        entropy=rng.entropy, spawn_key=tuple(rng.spawn_key) + (int(cell),)
    )
    return float(np.random.Generator(np.random.PCG64(child)).random())


def _tempered_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_step(
    grid: TokenGrid,
    model: BidirectionalTransformer,
    keep: int,
    temperature: float,
    rng: np.random.SeedSequence,
) -> TokenGrid:
    """Draw labels at every MASK cell, commit the `keep` most confident.

    Confidence is the tempered probability of the drawn label itself.
    Draws use one uniform per cell derived from (rng, cell index), so the
    result is independent of iteration order. Ties in the confidence
    ranking break toward the lowest flat cell index.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    flat = grid.labels.reshape(-1)
    missing = np.flatnonzero(flat == grid.mask_label)
    if keep > len(missing):
        log.warning("keep=%d exceeds %d missing cells; clamping", keep, len(missing))
        keep = len(missing)
    if keep == 0 or len(missing) == 0:
        return grid.copy()
    logits = predict(grid, model).data[missing]
    probs = _tempered_probs(logits, temperature)
    cum = probs.cumsum(axis=-1)
    cum[:, -1] = 1.0
    draws = np.empty(len(missing), dtype=np.int32)
    scores = np.empty(len(missing), dtype=np.float64)
    for j, cell in enumerate(missing):
        u = _cell_uniform(rng, int(cell))
        label = int(np.searchsorted(cum[j], u, side="right"))
        label = min(label, probs.shape[1] - 1)
        draws[j] = label
        scores[j] = probs[j, label]
    order = np.argsort(-scores, kind="stable")
    committed = missing[order[:keep]]
    out = flat.copy()
    out[committed] = draws[order[:keep]]
    return TokenGrid(out.reshape(grid.shape), grid.mask_label)


def sample_all(
    grid: TokenGrid,
    model: BidirectionalTransformer,
    schedule: SampleSchedule,
    rng: np.random.SeedSequence | int,
) -> TokenGrid:
    """Run the full schedule; returns a grid with no MASK cells left.

    Input visible cells are never rewritten, and cells committed at step
    i stay fixed for all later steps.
    """
    if isinstance(rng, int):
        rng = np.random.SeedSequence(rng)
    schedule.validate(grid.missing_count())
    current = grid.copy()
    for i in range(schedule.steps):
        step_rng = np.random.SeedSequence(
            entropy=rng.entropy, spawn_key=tuple(rng.spawn_key) + (i,)
        )
        current = sample_step(
            current, model, schedule.keep_counts[i], schedule.temperatures[i], step_rng
        )
    assert current.missing_count() == 0
    return current
