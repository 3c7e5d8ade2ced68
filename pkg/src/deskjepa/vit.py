"""Tubelet tokenizer and spatiotemporal transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class TubeletConfig:
    patch: int = 4
    tubelet: int = 2
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    # fixed input standardisation, like per-channel image normalisation
    pixel_mean: float = 0.0
    pixel_std: float = 1.0
    # None keeps std * sqrt(fan_in) at the value a 16x16x2 RGB tubelet gets with std 0.02
    patch_init_std: float | None = None

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    def grid(self, T_: int, H: int, W: int) -> tuple[int, int, int]:
        for axis, n, k in (("time", T_, self.tubelet), ("height", H, self.patch), ("width", W, self.patch)):
            if n % k:
                raise ValueError(f"{axis} axis of length {n} is not divisible by {'tubelet' if axis == 'time' else 'patch'} size {k}")
        return T_ // self.tubelet, H // self.patch, W // self.patch

    @property
    def patch_dim(self) -> int:
        return self.tubelet * self.patch * self.patch

    @property
    def patch_std(self) -> float:
        if self.patch_init_std is not None:
            return self.patch_init_std
        return 0.02 * float(np.sqrt(REFERENCE_PATCH_FAN_IN / self.patch_dim))


REFERENCE_PATCH_FAN_IN = 2 * 16 * 16 * 3


def patchify(video: np.ndarray, patch: int, tubelet: int) -> np.ndarray:
    """(B, T, H, W) or (T, H, W) -> (B, N, t*p*p), tokens in time-major, row, column order."""
    squeeze = video.ndim == 3
    if squeeze:
        video = video[None]
    B, T_, H, W = video.shape
    nt, nh, nw = T_ // tubelet, H // patch, W // patch
    x = video.reshape(B, nt, tubelet, nh, patch, nw, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(B, nt * nh * nw, tubelet * patch * patch)
    return x[0] if squeeze else x


def unpatchify(tokens: np.ndarray, grid: tuple[int, int, int], patch: int, tubelet: int) -> np.ndarray:
    B = tokens.shape[0]
    nt, nh, nw = grid
    x = tokens.reshape(B, nt, nh, nw, tubelet, patch, patch).transpose(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(B, nt * tubelet, nh * patch, nw * patch)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = positions[:, None].astype(np.float64) * omega[None]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_3d(dim: int, grid: tuple[int, int, int]) -> np.ndarray:
    """Fixed (N, dim) table; time and height each get an even share, width the rest."""
    if dim % 2:
        raise ValueError("positional embedding dim must be even")
    d_t = (dim // 6) * 2
    d_h = d_t
    d_w = dim - d_t - d_h
    nt, nh, nw = grid
    tt, hh, ww = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    emb = np.concatenate(
        [_sincos_1d(d_t, tt.ravel()), _sincos_1d(d_h, hh.ravel()), _sincos_1d(d_w, ww.ravel())], axis=1
    )
    return emb


def token_index(grid: tuple[int, int, int], t: int, h: int, w: int) -> int:
    _, nh, nw = grid
    return (t * nh + h) * nw + w


def token_coords(grid: tuple[int, int, int], idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.unravel_index(np.asarray(idx), grid)


class VideoEncoder(nn.Module):
    """Linear tubelet embedding + fixed 3D sin-cos positions + pre-norm blocks."""

    def __init__(self, cfg: TubeletConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim, rng, std=cfg.patch_std)
        self.blocks = [nn.Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self._pos_cache: dict[tuple, np.ndarray] = {}

    def pos_embed(self, grid) -> np.ndarray:
        key = (tuple(grid), T.default_dtype())
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_pos_embed_3d(self.cfg.embed_dim, grid).astype(T.default_dtype())
        return self._pos_cache[key]

    def tokenize(self, video) -> tuple[Tensor, tuple[int, int, int]]:
        """(B, T, H, W) array -> ((B, N, D) tokens, grid dims)."""
        video = np.asarray(video)
        if video.ndim == 3:
            video = video[None]
        grid = self.cfg.grid(*video.shape[1:])
        dt = T.default_dtype()
        video = (video.astype(dt, copy=False) - dt(self.cfg.pixel_mean)) / dt(self.cfg.pixel_std)
        patches = patchify(video, self.cfg.patch, self.cfg.tubelet)
        tokens = self.patch_embed(Tensor(patches)) + Tensor(self.pos_embed(grid))
        return tokens, grid

    def encode(self, tokens: Tensor, subset=None) -> Tensor:
        """Run the blocks over ``tokens[:, subset]`` only (all tokens when subset is None)."""
        if subset is not None:
            subset = np.asarray(subset, dtype=np.intp)
            if subset.size == 0:
                raise ValueError("encode: empty token subset")
            if subset.min() < 0 or subset.max() >= tokens.shape[1]:
                raise IndexError(f"encode: subset index out of range for {tokens.shape[1]} tokens")
            tokens = T.take(tokens, subset, axis=1)
        x = tokens
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def __call__(self, video, subset=None) -> Tensor:
        tokens, _ = self.tokenize(video)
        return self.encode(tokens, subset)


class Predictor(nn.Module):
    """Narrow transformer mapping context embeddings + positioned mask tokens to target embeddings."""

    def __init__(
        self,
        enc_dim: int,
        dim: int,
        depth: int,
        heads: int,
        mlp_ratio: float,
        rng: np.random.Generator,
        out_dim: int | None = None,
    ):
        self.dim = dim
        self.embed = nn.Linear(enc_dim, dim, rng)
        self.mask_token = nn.parameter(nn.trunc_normal(rng, (1, 1, dim)))
        self.blocks = [nn.Block(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, out_dim or enc_dim, rng)
        self._pos_cache: dict[tuple, np.ndarray] = {}

    def pos_embed(self, grid) -> np.ndarray:
        key = (tuple(grid), T.default_dtype())
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_pos_embed_3d(self.dim, grid).astype(T.default_dtype())
        return self._pos_cache[key]

    def __call__(self, context: Tensor, grid, context_idx, target_idx, return_all: bool = False) -> Tensor:
        """Predict one row per ``target_idx`` position, in that order.

        With ``return_all`` every grid position is returned in flat token order,
        context rows included (the pixel decoder needs this).
        """
        pos = self.pos_embed(grid)
        B = context.shape[0]
        ctx = self.embed(context) + Tensor(pos[context_idx])
        n_tgt = len(target_idx)
        zeros = Tensor(np.zeros((B, n_tgt, self.dim), dtype=pos.dtype))
        masks = zeros + self.mask_token + Tensor(pos[target_idx])
        x = T.concat([ctx, masks], axis=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        if return_all:
            order = np.argsort(np.concatenate([np.asarray(context_idx), np.asarray(target_idx)]), kind="stable")
            return self.proj(T.take(x, order, axis=1))
        x = x[:, ctx.shape[1]:]
        return self.proj(x)
