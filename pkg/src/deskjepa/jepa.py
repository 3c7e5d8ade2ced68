"""Latent-prediction pretraining: context encoder, predictor and an EMA target encoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masking import MaskSpec, sample_multiblock_mask
from .optim import AdamW
from .tensor import Tensor
from .training import LrSchedule, NonFiniteLoss, augment_batch, collapse_metrics, epoch_batches
from .vit import Predictor, TubeletConfig, VideoEncoder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JepaConfig:
    encoder: TubeletConfig = field(default_factory=TubeletConfig)
    pred_dim: int = 48
    pred_depth: int = 2
    pred_heads: int = 4
    batch_size: int = 16
    epochs: int = 10
    ipe: int = 5
    warmup: float = 1.0
    cooldown: float = 2.0
    lr: float = 5e-4
    final_lr: float = 1e-6
    weight_decay: float = 0.04
    ema_momentum: float = 0.99925
    betas: tuple[float, float] = (0.9, 0.95)
    masking: MaskSpec = field(default_factory=MaskSpec)
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (0.9, 1.1)
    log_every: int = 5
    seed: int = 0

    @property
    def total_updates(self) -> int:
        return self.epochs * self.ipe

    def schedule(self) -> LrSchedule:
        return LrSchedule(
            total=self.total_updates,
            warmup=int(round(self.warmup * self.ipe)),
            cooldown=int(round(self.cooldown * self.ipe)),
            lr=self.lr,
            final_lr=self.final_lr,
        )


class JepaState:
    """Context encoder, predictor (with mask token) and the EMA target encoder."""

    def __init__(self, cfg: JepaConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.context = VideoEncoder(cfg.encoder, rng)
        self.predictor = Predictor(
            cfg.encoder.embed_dim, cfg.pred_dim, cfg.pred_depth, cfg.pred_heads, cfg.encoder.mlp_ratio, rng
        )
        self.target = VideoEncoder(cfg.encoder, rng)
        self.target.load_state_dict(self.context.state_dict())
        self.target.freeze()
        self.momentum = cfg.ema_momentum
        self.step = 0

    def trainable(self) -> list[Tensor]:
        params = []
        for prefix, mod in (("context", self.context), ("predictor", self.predictor)):
            for name, p in mod.named_parameters():
                p.name = f"{prefix}.{name}"
                params.append(p)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"context.{k}": v for k, v in self.context.state_dict().items()}
        out.update({f"predictor.{k}": v for k, v in self.predictor.state_dict().items()})
        out.update({f"target.{k}": v for k, v in self.target.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, mod in (("context", self.context), ("predictor", self.predictor), ("target", self.target)):
            mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")})


def predict_targets(state: JepaState, videos: np.ndarray, context_idx, target_idx) -> Tensor:
    tokens, grid = state.context.tokenize(videos)
    ctx = state.context.encode(tokens, context_idx)
    return state.predictor(ctx, grid, context_idx, target_idx)


def target_embeddings(state: JepaState, videos: np.ndarray, target_idx) -> np.ndarray:
    """EMA encoder over the full token grid, rows gathered at ``target_idx``; a constant."""
    with T.no_grad():
        full = state.target(videos)
    return full.data[:, np.asarray(target_idx)]


def jepa_loss(state: JepaState, videos: np.ndarray, mask_sets, return_targets: bool = False):
    context_idx, target_idx = (np.asarray(m) for m in mask_sets)
    if target_idx.size == 0:
        raise ValueError("jepa_loss: empty target set")
    if context_idx.size == 0:
        raise ValueError("jepa_loss: empty context set")
    videos = np.asarray(videos)
    if videos.ndim == 3:
        videos = videos[None]
    with T.no_grad():
        full = state.target(videos)
    targets = Tensor(full.data[:, target_idx])
    pred = predict_targets(state, videos, context_idx, target_idx)
    loss = T.l1_loss(pred, targets)
    if return_targets:
        return loss, full.data
    return loss


def ema_update(state: JepaState) -> None:
    """target <- m * target + (1 - m) * context, elementwise."""
    m = state.momentum
    tgt = dict(state.target.named_parameters(include_frozen=True))
    ctx = dict(state.context.named_parameters(include_frozen=True))
    if tgt.keys() != ctx.keys():
        raise ValueError("ema_update: target and context encoders differ in structure")
    for name, t in tgt.items():
        c = ctx[name]
        if t.shape != c.shape:
            raise ValueError(f"ema_update: shape mismatch for {name}: {t.shape} vs {c.shape}")
        t.data = m * t.data + (1.0 - m) * c.data


def train(videos: np.ndarray, cfg: JepaConfig, state: JepaState | None = None):
    """Run ``cfg.total_updates`` optimizer steps; returns (state, curve rows).

    Each update: sample a batch, random-resized-crop every clip, draw one multiblock
    mask for the batch, L1 latent loss, AdamW with the schedule, EMA update.
    """
    if len(videos) == 0:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng([cfg.seed, 11])
    state = state or JepaState(cfg)
    params = state.trainable()
    opt = AdamW(params, betas=cfg.betas)
    sched = cfg.schedule()
    grid = cfg.encoder.grid(*videos.shape[1:])
    batches = epoch_batches(len(videos), cfg.batch_size, rng)
    curve = []
    for step in range(cfg.total_updates):
        idx = next(batches)
        batch = augment_batch(videos[idx], rng, cfg.crop_scale, cfg.crop_aspect)
        masks = sample_multiblock_mask(grid, cfg.masking, rng)
        opt.zero_grad()
        loss, full = jepa_loss(state, batch, masks, return_targets=True)
        lv = loss.item()
        if not math.isfinite(lv):
            raise NonFiniteLoss(
                f"non-finite JEPA loss {lv} at update {step}; lr={sched(step):.3e}, "
                f"context={len(masks[0])} target={len(masks[1])} tokens"
            )
        T.backward(loss)
        lr = sched(step)
        opt.step(lr, cfg.weight_decay)
        ema_update(state)
        state.step += 1
        if (step + 1) % cfg.log_every == 0:
            stats = collapse_metrics(full.mean(axis=1))
            curve.append({"update": step + 1, "loss": lv, "lr": lr, "min_std": stats["min_std"]})
            log.info("jepa update %d loss %.5f lr %.2e min_std %.4f", step + 1, lv, lr, stats["min_std"])
    return state, curve
