"""Pieces shared by both pretraining objectives: schedule, augmentation, batching, curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup 0 -> lr, constant, then linear cooldown lr -> final_lr."""

    total: int
    warmup: int
    cooldown: int
    lr: float
    final_lr: float

    def __post_init__(self):
        if self.warmup + self.cooldown > self.total:
            raise ValueError(f"warmup ({self.warmup}) + cooldown ({self.cooldown}) exceed total updates ({self.total})")

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * step / self.warmup
        start = self.total - self.cooldown
        if step < start or self.cooldown == 0:
            return self.lr
        frac = min(1.0, (step - start) / self.cooldown)
        return self.lr + (self.final_lr - self.lr) * frac


def _bilinear(frames: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (T, H, W) frames at the outer grid ys x xs with edge clamping."""
    H, W = frames.shape[-2:]
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    f00 = frames[:, y0][:, :, x0]
    f01 = frames[:, y0][:, :, x1]
    f10 = frames[:, y1][:, :, x0]
    f11 = frames[:, y1][:, :, x1]
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(
    video: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.5, 1.0),
    ratio: tuple[float, float] = (0.9, 1.1),
) -> np.ndarray:
    """One crop box per clip (shared by all frames), resized back to the input size."""
    T_, H, W = video.shape
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = math.sqrt(target * ar)
        h = math.sqrt(target / ar)
        if w <= W and h <= H:
            break
    else:
        w, h = float(W), float(H)
    top = rng.uniform(0, H - h)
    left = rng.uniform(0, W - w)
    ys = top + (np.arange(H) + 0.5) * h / H - 0.5
    xs = left + (np.arange(W) + 0.5) * w / W - 0.5
    return _bilinear(video, ys, xs).astype(video.dtype)


def augment_batch(videos: np.ndarray, rng: np.random.Generator, scale, ratio) -> np.ndarray:
    return np.stack([random_resized_crop(v, rng, scale, ratio) for v in videos])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index batches forever; each pass is a fresh permutation, ragged tail dropped."""
    if n < batch_size:
        raise ValueError(f"dataset of {n} clips is smaller than the batch size {batch_size}")
    while True:
        perm = rng.permutation(n)
        for i in range(n // batch_size):
            yield perm[i * batch_size:(i + 1) * batch_size]


def collapse_metrics(embeddings: np.ndarray) -> dict[str, float]:
    """Per-dimension standard deviation summary over a batch of pooled embeddings (n, D)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"collapse metrics need a (n >= 2, D) batch, got shape {emb.shape}")
    std = emb.std(axis=0)
    return {"min_std": float(std.min()), "mean_std": float(std.mean())}


CURVE_HEADER = ("update", "loss", "lr", "min_std")


def write_curve(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r["update"], f"{r['loss']:.8e}", f"{r['lr']:.8e}", f"{r['min_std']:.8e}"])


class NonFiniteLoss(RuntimeError):
    pass
