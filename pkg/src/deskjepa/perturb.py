"""Ultrasound-specific perturbations applied inside a binary scan mask.

All transforms take a clip of shape (T, H, W) with intensities in [0, 1] and a
(H, W) scan mask. Pixels outside the mask are returned untouched (bit-exact).
Spatial maps that model acquisition geometry (attenuation, shadows) are built
once per clip and reused for every frame.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import ndimage

KINDS = ("depth_linear", "depth_power", "shadow_band", "shadow_2d", "haze", "speckle_reduction")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def seed_from_name(name: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 bytes of ``name``."""
    if not name:
        raise ValueError("seed_from_name: empty name")
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _mask_of(video: np.ndarray, mask) -> np.ndarray:
    H, W = video.shape[-2:]
    if mask is None:
        return np.ones((H, W), dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (H, W):
        raise ValueError(f"scan mask shape {mask.shape} does not match frame shape {(H, W)}")
    return mask


def _apply_map(video: np.ndarray, mult: np.ndarray, mask) -> np.ndarray:
    m = _mask_of(video, mask)
    video = np.asarray(video)
    return np.where(m, video * mult.astype(video.dtype), video)


# -- scan masks ---------------------------------------------------------------

def auto_scan_mask(frame: np.ndarray, tau: float = 10.0) -> np.ndarray:
    """Threshold mean intensity on a 0-255 scale, then 3x3 closing and 3x3 opening."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=-1)
    raw = (frame * 255.0 > tau).astype(np.uint8)
    closed = ndimage.minimum_filter(ndimage.maximum_filter(raw, size=3, mode="nearest"), size=3, mode="nearest")
    opened = ndimage.maximum_filter(ndimage.minimum_filter(closed, size=3, mode="nearest"), size=3, mode="nearest")
    return opened.astype(bool)


# -- depth attenuation ----------------------------------------------------------

def depth_linear_map(H: int, W: int, alpha: float) -> np.ndarray:
    y = np.arange(H, dtype=np.float64)[:, None]
    return np.broadcast_to(np.maximum(0.0, 1.0 - alpha * y / H), (H, W))


def depth_attenuation_linear(video, alpha: float, mask=None) -> np.ndarray:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    video = np.asarray(video)
    return _apply_map(video, depth_linear_map(*video.shape[-2:], alpha), mask)


def depth_power_map(H: int, W: int, gamma: float, a_min: float) -> np.ndarray:
    y = np.arange(H, dtype=np.float64)[:, None]
    return np.broadcast_to(np.maximum(a_min, 1.0 - (y / H) ** gamma), (H, W))


def depth_attenuation_power(video, gamma: float, a_min: float = 0.0, mask=None) -> np.ndarray:
    if not 0.5 <= gamma <= 3.0:
        warnings.warn(f"attenuation rate {gamma} outside documented range [0.5, 3.0]", stacklevel=2)
    if not 0.0 <= a_min <= 1.0:
        warnings.warn(f"a_min {a_min} outside documented range [0, 1]", stacklevel=2)
    video = np.asarray(video)
    return _apply_map(video, depth_power_map(*video.shape[-2:], gamma, a_min), mask)


# -- shadows --------------------------------------------------------------------

def shadow_band_map(H: int, W: int, x0: float, sigma: float) -> np.ndarray:
    x = np.arange(W, dtype=np.float64)[None, :]
    return np.broadcast_to(1.0 - np.exp(-((x - x0) ** 2) / (2.0 * sigma ** 2)), (H, W))


def gaussian_shadow_band(video, x0: float | None, sigma: float, mask=None, seed: int | None = None) -> np.ndarray:
    """Vertical shadow band centred on column ``x0`` (pixels) with width ``sigma`` (pixels)."""
    video = np.asarray(video)
    H, W = video.shape[-2:]
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if x0 is None:
        x0 = float(np.random.default_rng(seed).uniform(0.0, W))
    return _apply_map(video, shadow_band_map(H, W, x0, sigma), mask)


def shadow_2d_map(H: int, W: int, s: float, sigma_x: float, sigma_y: float, mu_x: float, mu_y: float) -> np.ndarray:
    """Shadow multiplier; sigmas and centres are fractions of W and H."""
    x = np.arange(W, dtype=np.float64)[None, :]
    y = np.arange(H, dtype=np.float64)[:, None]
    sx, sy = sigma_x * W, sigma_y * H
    mx, my = mu_x * W, mu_y * H
    return 1.0 - s * np.exp(-((x - mx) ** 2) / (2 * sx ** 2) - ((y - my) ** 2) / (2 * sy ** 2))


def gaussian_shadow_2d(
    video,
    s: float,
    sigma_x: float,
    sigma_y: float,
    mu_x: float | None = None,
    mu_y: float | None = None,
    mask=None,
    seed: int | None = None,
) -> np.ndarray:
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"shadow strength must lie in [0, 1], got {s}")
    video = np.asarray(video)
    H, W = video.shape[-2:]
    rng = np.random.default_rng(seed)
    if mu_x is None:
        mu_x = float(rng.uniform(0.2, 0.8))
    if mu_y is None:
        mu_y = float(rng.uniform(0.2, 0.8))
    return _apply_map(video, shadow_2d_map(H, W, s, sigma_x, sigma_y, mu_x, mu_y), mask)


# -- haze -----------------------------------------------------------------------

def haze_map(H: int, W: int, radius: float, sigma_h: float, h_max: float, apex=None) -> np.ndarray:
    """Additive haze; ``radius`` and ``sigma_h`` are fractions of the image diagonal."""
    diag = math.hypot(H, W)
    x0, y0 = apex if apex is not None else ((W - 1) / 2.0, 0.0)
    x = np.arange(W, dtype=np.float64)[None, :]
    y = np.arange(H, dtype=np.float64)[:, None]
    r2 = (x - x0) ** 2 + (y - y0) ** 2
    sig = sigma_h * diag
    haze = h_max * np.exp(-r2 / (2.0 * sig ** 2))
    return np.where(r2 <= (radius * diag) ** 2, haze, 0.0)


def haze_artifact(video, radius: float, sigma_h: float, h_max: float = 0.3, mask=None, apex=None) -> np.ndarray:
    video = np.asarray(video)
    H, W = video.shape[-2:]
    m = _mask_of(video, mask)
    haze = haze_map(H, W, radius, sigma_h, h_max, apex).astype(video.dtype)
    return np.where(m, np.minimum(video.dtype.type(1.0), video + haze), video)


# -- speckle reduction ------------------------------------------------------------

def bilateral_frame(frame: np.ndarray, sigma_s: float, sigma_r: float, window: int) -> np.ndarray:
    """Bilateral filter; the window is clamped to the frame at the borders."""
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape
    r = window // 2
    num = np.zeros_like(frame)
    den = np.zeros_like(frame)
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            ys0, ys1 = max(0, -di), min(H, H - di)
            xs0, xs1 = max(0, -dj), min(W, W - dj)
            centre = frame[ys0:ys1, xs0:xs1]
            nb = frame[ys0 + di:ys1 + di, xs0 + dj:xs1 + dj]
            w = math.exp(-(di * di + dj * dj) / (2.0 * sigma_s ** 2)) * np.exp(-((nb - centre) ** 2) / (2.0 * sigma_r ** 2))
            num[ys0:ys1, xs0:xs1] += w * nb
            den[ys0:ys1, xs0:xs1] += w
    return num / den


def speckle_reduction(video, sigma_s: float, sigma_r: float, window: int = 5, mask=None) -> np.ndarray:
    if window % 2 == 0:
        raise ValueError(f"bilateral window must be odd, got {window}")
    if not 3 <= window <= 11:
        raise ValueError(f"bilateral window must lie in [3, 11], got {window}")
    video = np.asarray(video)
    m = _mask_of(video, mask)
    out = np.stack([bilateral_frame(f, sigma_s, sigma_r, window) for f in video]).astype(video.dtype)
    return np.where(m, out, video)


# -- specs, presets, composition ------------------------------------------------

_PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "depth_linear": {"alpha": (0.0, math.inf)},
    "depth_power": {"gamma": (0.5, 3.0), "a_min": (0.0, 1.0)},
    "shadow_band": {"sigma": (0.0, 1.0), "x0": (0.0, 1.0)},
    "shadow_2d": {"s": (0.0, 1.0), "sigma_x": (0.01, 0.3), "sigma_y": (0.01, 0.3), "mu_x": (0.0, 1.0), "mu_y": (0.0, 1.0)},
    "haze": {"radius": (0.1, 1.0), "sigma_h": (0.01, 0.2), "h_max": (0.0, 1.0)},
    "speckle_reduction": {"sigma_s": (0.1, 2.0), "sigma_r": (0.1, 2.0), "window": (3, 11)},
}


@dataclass(frozen=True)
class PerturbSpec:
    """One perturbation. Tuple-valued parameters are ranges sampled uniformly per application.

    ``shadow_band.sigma`` and ``shadow_band.x0`` are fractions of the frame width.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.p}")
        allowed = _PARAM_RANGES[self.kind]
        for name, val in self.params.items():
            if name not in allowed:
                raise ValueError(f"{self.kind}: unknown parameter {name!r}")
            lo, hi = allowed[name]
            vals = val if isinstance(val, (tuple, list)) else (val,)
            for v in vals:
                if name == "gamma" and not lo <= v <= hi:
                    continue  # out-of-range rates only warn when applied
                if not lo <= v <= hi:
                    raise ValueError(f"{self.kind}.{name}={v} outside documented range [{lo}, {hi}]")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def with_seed(self, seed: int) -> "PerturbSpec":
        return PerturbSpec(self.kind, dict(self.params), self.p, seed)


PRESETS: Mapping[str, PerturbSpec] = MappingProxyType({
    "da-075": PerturbSpec("depth_power", {"gamma": 0.75, "a_min": 0.0}),
    "da-150": PerturbSpec("depth_power", {"gamma": 1.50, "a_min": 0.0}),
    "da-215": PerturbSpec("depth_power", {"gamma": 2.15, "a_min": 0.0}),
    "gs-low": PerturbSpec("shadow_2d", {"s": 0.4, "sigma_x": 0.15, "sigma_y": 0.15}),
    "gs-med": PerturbSpec("shadow_2d", {"s": 0.6, "sigma_x": 0.20, "sigma_y": 0.20}),
    "gs-high": PerturbSpec("shadow_2d", {"s": 0.8, "sigma_x": 0.25, "sigma_y": 0.25}),
    "depth-0.3": PerturbSpec("depth_linear", {"alpha": 0.3}),
    "depth-0.5": PerturbSpec("depth_linear", {"alpha": 0.5}),
    "depth-0.7": PerturbSpec("depth_linear", {"alpha": 0.7}),
    "shadow-0.1": PerturbSpec("shadow_band", {"sigma": 0.1}),
    "shadow-0.2": PerturbSpec("shadow_band", {"sigma": 0.2}),
    "shadow-0.3": PerturbSpec("shadow_band", {"sigma": 0.3}),
})

MAIN_GRID = ("depth-0.3", "depth-0.5", "depth-0.7", "shadow-0.1", "shadow-0.2", "shadow-0.3")


def get_preset(name: str) -> PerturbSpec:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None


def _draw(val, rng: np.random.Generator) -> float:
    if isinstance(val, (tuple, list)):
        return float(rng.uniform(val[0], val[1]))
    return val


def sample_plan(specs: Sequence[PerturbSpec], seed: int | None = None) -> list[dict | None]:
    """Decide which specs fire and draw their per-video parameters.

    Each spec gets its own generator seeded by (seed or spec.seed, position), so
    adding a spec never changes the draws of the ones before it.
    """
    plan: list[dict | None] = []
    for i, spec in enumerate(specs):
        rng = np.random.default_rng([spec.seed if seed is None else seed, i])
        if rng.random() >= spec.p:
            plan.append(None)
            continue
        drawn = {k: _draw(v, rng) for k, v in spec.params.items() if spec.kind != "speckle_reduction"}
        if spec.kind == "speckle_reduction":
            drawn = dict(spec.params)
        drawn["_seed"] = int(rng.integers(0, 2**63))
        plan.append(drawn)
    return plan


def apply_spec(kind: str, params: Mapping[str, Any], video: np.ndarray, mask=None) -> np.ndarray:
    """Apply one fully-resolved perturbation; unspecified centres come from ``params['_seed']``."""
    video = np.asarray(video)
    H, W = video.shape[-2:]
    seed = params.get("_seed")
    if kind == "depth_linear":
        return depth_attenuation_linear(video, params["alpha"], mask)
    if kind == "depth_power":
        return depth_attenuation_power(video, params["gamma"], params.get("a_min", 0.0), mask)
    if kind == "shadow_band":
        x0 = params.get("x0")
        return gaussian_shadow_band(video, None if x0 is None else x0 * W, params["sigma"] * W, mask, seed)
    if kind == "shadow_2d":
        return gaussian_shadow_2d(
            video, params["s"], params["sigma_x"], params["sigma_y"],
            params.get("mu_x"), params.get("mu_y"), mask, seed,
        )
    if kind == "haze":
        return haze_artifact(video, params["radius"], params["sigma_h"], params.get("h_max", 0.3), mask)
    if kind == "speckle_reduction":
        # frame-independent: ranges are redrawn for every frame
        rng = np.random.default_rng(seed)
        window = int(params.get("window", 5))
        frames = []
        for f in video:
            ss = _draw(params.get("sigma_s", 0.5), rng)
            sr = _draw(params.get("sigma_r", 0.5), rng)
            frames.append(speckle_reduction(f[None], ss, sr, window, mask)[0])
        return np.stack(frames)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def compose(specs: Sequence[PerturbSpec], video, mask=None, seed: int | None = None) -> np.ndarray:
    out = np.asarray(video)
    for spec, drawn in zip(specs, sample_plan(specs, seed)):
        if drawn is not None:
            out = apply_spec(spec.kind, drawn, out, mask)
    return out
