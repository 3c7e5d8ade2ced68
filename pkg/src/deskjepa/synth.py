"""Synthetic echocardiogram-like cine clips with known ground truth.

Each study draws an ejection fraction ``ef`` and two hidden scalars ``a`` and
``b``. ``a`` sets the size of the second chamber seen only in view 0, ``b`` the
size of the vessel seen only in view 2, and the two-view target is
``rv = a + b``. All dark chambers in a clip share one area cycle, so the
thresholded dark area of a noiseless clip varies by exactly ``ef``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

N_VIEWS = 3
TISSUE = (0.55, 0.65)
MYOCARDIUM = (0.85, 0.95)
BLOOD = 0.12
# midway between blood and myocardium; tissue stays above it
DARK_THRESHOLD = 0.5
LABEL_HEADER = ("id", "view_class", "ef", "rv", "split")


@dataclass(frozen=True)
class SectorGeometry:
    apex: tuple[float, float]
    half_angle: float
    max_radius: float

    def validate(self, H: int, W: int) -> None:
        if not self.half_angle > 0:
            raise ValueError(f"sector half-angle must be positive, got {self.half_angle}")
        if self.half_angle >= math.pi / 2:
            raise ValueError(f"sector half-angle must be below pi/2, got {self.half_angle}")
        if self.max_radius <= 0 or self.max_radius > math.hypot(H, W):
            raise ValueError(f"max_radius {self.max_radius} outside (0, image diagonal]")
        x0, y0 = self.apex
        if not (0 <= x0 <= W - 1) or y0 > H - 1:
            raise ValueError(f"apex {self.apex} must lie inside or above the frame")


def default_geometry(H: int, W: int) -> SectorGeometry:
    return SectorGeometry(apex=((W - 1) / 2.0, 0.0), half_angle=math.pi / 4, max_radius=float(H))


def geometric_sector_mask(geometry: SectorGeometry, H: int, W: int) -> np.ndarray:
    geometry.validate(H, W)
    x0, y0 = geometry.apex
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = xx - x0, yy - y0
    inside = np.hypot(dx, dy) <= geometry.max_radius
    inside &= np.abs(np.arctan2(dx, dy)) <= geometry.half_angle
    return inside


@dataclass(frozen=True)
class StudyParams:
    ef: float
    a: float
    b: float
    jitter: tuple[float, float]
    size: float
    tissue: float
    myocardium: float

    @property
    def rv(self) -> float:
        return rv_from_params(self.a, self.b)


def rv_from_params(a: float, b: float) -> float:
    return a + b


def sample_study(rng: np.random.Generator) -> StudyParams:
    return StudyParams(
        ef=float(rng.uniform(0.1, 0.8)),
        a=float(rng.uniform(0.0, 1.0)),
        b=float(rng.uniform(0.0, 1.0)),
        jitter=(float(rng.uniform(-0.04, 0.04)), float(rng.uniform(-0.04, 0.04))),
        size=float(rng.uniform(0.9, 1.1)),
        tissue=float(rng.uniform(*TISSUE)),
        myocardium=float(rng.uniform(*MYOCARDIUM)),
    )


@dataclass
class SyntheticClip:
    video: np.ndarray
    view_class: int
    ef_truth: float
    rv_truth: float
    seed: int
    params: StudyParams | None = field(default=None, repr=False)


def _chambers(view: int, p: StudyParams, H: int, W: int):
    """(cx, cy, rx, ry, wall) in pixels at end-diastole for every chamber of a layout."""
    jx, jy = p.jitter[0] * W, p.jitter[1] * H
    s = p.size
    if view == 0:  # two chambers side by side; right one scales with a
        return [
            (0.38 * W + jx, 0.60 * H + jy, 0.13 * W * s, 0.20 * H * s, 1.6),
            (0.66 * W + jx, 0.58 * H + jy, (0.06 + 0.07 * p.a) * W * s, (0.09 + 0.09 * p.a) * H * s, 1.3),
        ]
    if view == 1:  # one long horizontal chamber with a small atrium below
        return [
            (0.50 * W + jx, 0.52 * H + jy, 0.26 * W * s, 0.11 * H * s, 1.6),
            (0.58 * W + jx, 0.80 * H + jy, 0.07 * W * s, 0.06 * H * s, 1.2),
        ]
    if view == 2:  # round chamber plus a vessel whose size scales with b
        r = (0.04 + 0.06 * p.b) * W * s
        return [
            (0.48 * W + jx, 0.64 * H + jy, 0.17 * W * s, 0.17 * W * s, 1.8),
            (0.64 * W + jx, 0.36 * H + jy, r, r, 1.2),
        ]
    raise ValueError(f"view_class must be in 0..{N_VIEWS - 1}, got {view}")


def area_factor(t: np.ndarray | int, T: int, ef: float):
    """Chamber area relative to end-diastole: 1 at t=0, 1-ef at t=T/2."""
    return 1.0 - ef * (1.0 - np.cos(2.0 * np.pi * np.asarray(t) / T)) / 2.0


def _render_frame(view: int, p: StudyParams, H: int, W: int, factor: float, ss: int = 4) -> np.ndarray:
    off = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(H)[:, None] + off[None, :]).ravel()
    xs = (np.arange(W)[:, None] + off[None, :]).ravel()
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = np.full(yy.shape, p.tissue)
    k = math.sqrt(factor)
    chambers = _chambers(view, p, H, W)
    for cx, cy, rx, ry, wall in chambers:
        ox, oy = rx * k + wall, ry * k + wall
        ring = ((xx - cx) / ox) ** 2 + ((yy - cy) / oy) ** 2 <= 1.0
        img[ring] = p.myocardium
    for cx, cy, rx, ry, _ in chambers:
        cavity = ((xx - cx) / (rx * k)) ** 2 + ((yy - cy) / (ry * k)) ** 2 <= 1.0
        img[cavity] = BLOOD
    return img.reshape(H, ss, W, ss).mean(axis=(1, 3))


def rayleigh_speckle(rng: np.random.Generator, shape, strength: float) -> np.ndarray:
    """Multiplicative factor 1 + strength * (R - 1) with R Rayleigh of unit mean."""
    r = rng.rayleigh(scale=math.sqrt(2.0 / math.pi), size=shape)
    return 1.0 + strength * (r - 1.0)


def generate_clip(
    seed: int,
    geometry: SectorGeometry | None,
    view_class: int,
    ef: float,
    speckle_strength: float,
    T: int = 8,
    H: int = 32,
    W: int = 32,
    params: StudyParams | None = None,
) -> SyntheticClip:
    if not 0.1 <= ef <= 0.8:
        raise ValueError(f"ef must lie in [0.1, 0.8], got {ef}")
    if T < 8:
        raise ValueError(f"clips need at least 8 frames, got {T}")
    if not 0 <= view_class < N_VIEWS:
        raise ValueError(f"view_class must be in 0..{N_VIEWS - 1}, got {view_class}")
    geometry = geometry or default_geometry(H, W)
    mask = geometric_sector_mask(geometry, H, W)
    rng = np.random.default_rng(seed)
    if params is None:
        params = sample_study(rng)
    params = StudyParams(**{**params.__dict__, "ef": float(ef)})
    factors = area_factor(np.arange(T), T, ef)
    frames = np.stack([_render_frame(view_class, params, H, W, f) for f in factors])
    if speckle_strength > 0:
        frames = frames * rayleigh_speckle(rng, frames.shape, speckle_strength)
    video = np.clip(frames, 0.0, 1.0) * mask[None]
    return SyntheticClip(
        video=video.astype(np.float32),
        view_class=int(view_class),
        ef_truth=float(ef),
        rv_truth=params.rv,
        seed=int(seed),
        params=params,
    )


def dark_area(video: np.ndarray, mask: np.ndarray, threshold: float = DARK_THRESHOLD) -> np.ndarray:
    """Per-frame count of in-sector pixels darker than ``threshold``."""
    return ((video < threshold) & mask[None]).sum(axis=(1, 2))


# -- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n: int = 100
    seed: int = 0
    frames: int = 8
    height: int = 32
    width: int = 32
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)
    speckle: tuple[float, float] = (0.3, 0.9)


@dataclass
class LabelRow:
    id: str
    view_class: int
    ef: float
    rv: float
    split: str
    study: int


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def clip_seed(master: int, study: int, view: int) -> int:
    return int(np.random.SeedSequence([master, study, view]).generate_state(1, np.uint64)[0])


def plan_dataset(cfg: SynthConfig) -> list[LabelRow]:
    """Studies render all three views; clips fill train/val/test in a seeded study order."""
    n_studies = math.ceil(cfg.n / N_VIEWS)
    order = np.random.default_rng([cfg.seed, 1]).permutation(n_studies)
    ids = [(int(s), v) for s in order for v in range(N_VIEWS)]
    keep = ids[: cfg.n]
    counts = split_counts(cfg.n, cfg.splits)
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    rows = []
    for (study, view), split in zip(keep, names):
        p = sample_study(np.random.default_rng([cfg.seed, 2, study]))
        rows.append(LabelRow(f"s{study:05d}v{view}", view, p.ef, p.rv, split, study))
    return rows


def render_row(cfg: SynthConfig, row: LabelRow) -> SyntheticClip:
    p = sample_study(np.random.default_rng([cfg.seed, 2, row.study]))
    seed = clip_seed(cfg.seed, row.study, row.view_class)
    strength = float(np.random.default_rng(seed ^ 0x5EC).uniform(*cfg.speckle))
    return generate_clip(
        seed, default_geometry(cfg.height, cfg.width), row.view_class, p.ef, strength,
        T=cfg.frames, H=cfg.height, W=cfg.width, params=p,
    )


def labels_csv(rows: list[LabelRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABEL_HEADER)
    for r in rows:
        w.writerow([r.id, r.view_class, f"{r.ef:.6f}", f"{r.rv:.6f}", r.split])
    return buf.getvalue()


def read_labels(path) -> list[LabelRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LABEL_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LABEL_HEADER)}")
        for rec in reader:
            rid = rec["id"]
            study = int(rid[1:rid.index("v")]) if rid.startswith("s") and "v" in rid else -1
            rows.append(LabelRow(rid, int(rec["view_class"]), float(rec["ef"]), float(rec["rv"]), rec["split"], study))
    return rows


def generate_dataset(cfg: SynthConfig, out_dir) -> list[LabelRow]:
    """Write ``cfg.n`` ECV1 clips plus ``labels.csv`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output path {out} is not writable: {exc}") from exc
    rows = plan_dataset(cfg)
    for row in rows:
        clip = render_row(cfg, row)
        container.write(out / f"{row.id}.ecv", clip.video)
    (out / "labels.csv").write_text(labels_csv(rows))
    return rows


def load_dataset(root) -> tuple[list[LabelRow], np.ndarray]:
    root = Path(root)
    rows = read_labels(root / "labels.csv")
    videos = np.stack([container.read_clip(root / f"{r.id}.ecv") for r in rows])
    return rows, videos
