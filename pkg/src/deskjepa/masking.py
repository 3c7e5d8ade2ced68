"""Token masks for latent prediction (multiblock) and pixel reconstruction (tubes)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskSpec:
    short_blocks: int = 8
    short_scale: float = 0.15
    long_blocks: int = 2
    long_scale: float = 0.7
    temporal_scale: float = 1.0
    aspect_ratio: tuple[float, float] = (0.75, 1.5)

    def __post_init__(self):
        for s in (self.short_scale, self.long_scale, self.temporal_scale):
            if not 0.0 < s <= 1.0:
                raise ValueError(f"mask scales must lie in (0, 1], got {s}")

    def blocks(self) -> list[float]:
        return [self.short_scale] * self.short_blocks + [self.long_scale] * self.long_blocks


def _sample_block(nh: int, nw: int, scale: float, aspect: tuple[float, float], rng: np.random.Generator):
    area = scale * nh * nw
    ar = rng.uniform(*aspect)
    h = min(max(int(round(math.sqrt(area * ar))), 1), nh)
    w = min(max(int(round(math.sqrt(area / ar))), 1), nw)
    top = int(rng.integers(0, nh - h + 1))
    left = int(rng.integers(0, nw - w + 1))
    return top, left, h, w


def sample_multiblock_mask(grid, spec: MaskSpec, rng: np.random.Generator, max_tries: int = 16):
    """Return sorted (context_idx, target_idx) flat token indices.

    Targets are the union of spatial rectangles spanning ``temporal_scale`` of the
    time axis (all of it at the default 1.0); context is the complement.
    """
    nt, nh, nw = grid
    t_len = max(1, int(round(spec.temporal_scale * nt)))
    for _ in range(max_tries):
        masked = np.zeros(grid, dtype=bool)
        for scale in spec.blocks():
            top, left, h, w = _sample_block(nh, nw, scale, spec.aspect_ratio, rng)
            t0 = int(rng.integers(0, nt - t_len + 1)) if t_len < nt else 0
            masked[t0:t0 + t_len, top:top + h, left:left + w] = True
        flat = masked.ravel()
        if not flat.all():
            return np.flatnonzero(~flat), np.flatnonzero(flat)
    raise RuntimeError(f"multiblock mask left no context tokens after {max_tries} attempts on grid {grid}")


def tube_mask(grid, ratio: float, rng: np.random.Generator):
    """Mask round(ratio * nh * nw) spatial positions across every time index.

    Returns sorted (visible_idx, masked_idx) flat token indices.
    """
    nt, nh, nw = grid
    n_spatial = nh * nw
    n_mask = int(round(ratio * n_spatial))
    n_mask = min(max(n_mask, 0), n_spatial)
    spatial = np.zeros(n_spatial, dtype=bool)
    spatial[rng.permutation(n_spatial)[:n_mask]] = True
    masked = np.broadcast_to(spatial.reshape(1, nh, nw), grid).ravel()
    return np.flatnonzero(~masked), np.flatnonzero(masked)
