"""Pixel-reconstruction baseline with tube masking, and the compute-budget arithmetic
that pins it to the same number of optimizer updates as a paired latent-prediction run."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .jepa import JepaConfig
from .masking import tube_mask
from .optim import AdamW
from .tensor import Tensor
from .training import LrSchedule, NonFiniteLoss, augment_batch, collapse_metrics, epoch_batches
from .vit import Predictor, TubeletConfig, VideoEncoder, patchify

log = logging.getLogger(__name__)

PARITY_TOLERANCE = 0.01


class BudgetMismatch(ValueError):
    """The pixel baseline would not run the same update count as its paired run."""


@dataclass(frozen=True)
class ComputeBudget:
    dataset_size: int
    per_gpu_batch: int
    gpu_count: int
    grad_accum: int
    target_updates: int
    global_batch: int
    updates_per_epoch: int
    epochs: int
    actual_updates: int
    relative_error: float

    def summary(self) -> str:
        return (
            f"global_batch {self.global_batch}\n"
            f"updates_per_epoch {self.updates_per_epoch}\n"
            f"epochs {self.epochs}\n"
            f"actual_updates {self.actual_updates}\n"
            f"relative_error {self.relative_error * 100:+.2f}%"
        )


def compute_budget(dataset_size: int, per_gpu_batch: int, gpu_count: int, grad_accum: int, target_updates: int) -> ComputeBudget:
    """Epoch count that reaches ``target_updates`` given how many updates fit in one epoch.

    updates/epoch = floor(dataset / (per_gpu_batch * gpus)) // accum, so the floor is
    taken on micro-batches before the accumulation division.
    """
    vals = dict(
        dataset_size=dataset_size, per_gpu_batch=per_gpu_batch, gpu_count=gpu_count,
        grad_accum=grad_accum, target_updates=target_updates,
    )
    for name, v in vals.items():
        if int(v) != v or v <= 0:
            raise ValueError(f"compute_budget: {name} must be a positive integer, got {v}")
    micro = dataset_size // (per_gpu_batch * gpu_count)
    upe = micro // grad_accum
    if upe == 0:
        raise ValueError(
            f"compute_budget: dataset of {dataset_size} clips yields zero updates per epoch "
            f"at global batch {per_gpu_batch * gpu_count * grad_accum}"
        )
    epochs = math.ceil(target_updates / upe)
    actual = epochs * upe
    return ComputeBudget(
        **vals,
        global_batch=per_gpu_batch * gpu_count * grad_accum,
        updates_per_epoch=upe,
        epochs=epochs,
        actual_updates=actual,
        relative_error=actual / target_updates - 1.0,
    )


def paired_budget(paired: JepaConfig, dataset_size: int) -> ComputeBudget:
    """Single-process desk setting: one 'gpu', no accumulation, the JEPA batch size."""
    return compute_budget(dataset_size, paired.batch_size, 1, 1, paired.total_updates)


@dataclass(frozen=True)
class MaeConfig:
    encoder: TubeletConfig = field(default_factory=TubeletConfig)
    mask_ratio: float = 0.9
    decoder_dim: int = 48
    decoder_depth: int = 2
    decoder_heads: int = 4
    norm_pix: bool = True
    batch_size: int = 16
    lr: float = 5e-4
    final_lr: float = 1e-6
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.95)
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (0.9, 1.1)
    log_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.decoder_depth >= self.encoder.depth:
            raise ValueError(
                f"decoder depth {self.decoder_depth} must be smaller than encoder depth {self.encoder.depth}"
            )


class MaeState:
    """Encoder over visible tubes plus a narrow pixel decoder."""

    def __init__(self, cfg: MaeConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = VideoEncoder(cfg.encoder, rng)
        self.decoder = Predictor(
            cfg.encoder.embed_dim, cfg.decoder_dim, cfg.decoder_depth, cfg.decoder_heads,
            cfg.encoder.mlp_ratio, rng, out_dim=cfg.encoder.patch_dim,
        )
        self.step = 0

    def trainable(self) -> list[Tensor]:
        params = []
        for prefix, mod in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, p in mod.named_parameters():
                p.name = f"{prefix}.{name}"
                params.append(p)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, mod in (("encoder", self.encoder), ("decoder", self.decoder)):
            mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")})


def pixel_targets(videos: np.ndarray, cfg: TubeletConfig, norm_pix: bool = True) -> np.ndarray:
    """(B, N, t*p*p) tubelet pixels, each tubelet standardised when ``norm_pix``."""
    x = patchify(np.asarray(videos, dtype=T.default_dtype()), cfg.patch, cfg.tubelet)
    if norm_pix:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        x = (x - mu) / np.sqrt(var + 1e-6)
    return x.astype(T.default_dtype(), copy=False)


def reconstruct(state: MaeState, videos: np.ndarray, visible_idx, masked_idx) -> Tensor:
    """Decoder output for every token, flat grid order, shape (B, N, t*p*p)."""
    tokens, grid = state.encoder.tokenize(videos)
    enc = state.encoder.encode(tokens, visible_idx)
    return state.decoder(enc, grid, visible_idx, masked_idx, return_all=True)


def masked_mse(pred: Tensor, targets: np.ndarray, masked_idx) -> Tensor:
    """Mean squared error over the masked tubelets only."""
    masked_idx = np.asarray(masked_idx)
    return T.mse_loss(T.take(pred, masked_idx, axis=1), Tensor(targets[:, masked_idx]))


def mae_loss(state: MaeState, videos: np.ndarray, masks, return_pred: bool = False):
    visible_idx, masked_idx = (np.asarray(m) for m in masks)
    if masked_idx.size == 0:
        raise ValueError("mae_loss: empty masked set")
    videos = np.asarray(videos)
    if videos.ndim == 3:
        videos = videos[None]
    pred = reconstruct(state, videos, visible_idx, masked_idx)
    loss = masked_mse(pred, pixel_targets(videos, state.cfg.encoder, state.cfg.norm_pix), masked_idx)
    return (loss, pred) if return_pred else loss


def check_parity(cfg: MaeConfig, budget: ComputeBudget, paired: JepaConfig, dataset_size: int) -> None:
    """Raise BudgetMismatch unless this run is compute-matched to ``paired``."""
    problems = []
    if budget.target_updates != paired.total_updates:
        problems.append(f"budget targets {budget.target_updates} updates, paired run has {paired.total_updates}")
    if budget.dataset_size != dataset_size:
        problems.append(f"budget assumes {budget.dataset_size} clips, dataset has {dataset_size}")
    if budget.global_batch != paired.batch_size or cfg.batch_size != paired.batch_size:
        problems.append(
            f"batch sizes differ: budget {budget.global_batch}, mae {cfg.batch_size}, paired {paired.batch_size}"
        )
    if cfg.encoder != paired.encoder:
        problems.append("encoder architectures differ")
    if (cfg.crop_scale, cfg.crop_aspect) != (paired.crop_scale, paired.crop_aspect):
        problems.append("augmentation ranges differ")
    rel = abs(budget.actual_updates - paired.total_updates) / paired.total_updates
    if rel > PARITY_TOLERANCE:
        problems.append(
            f"update count {budget.actual_updates} is {rel:.2%} away from {paired.total_updates} "
            f"(tolerance {PARITY_TOLERANCE:.0%})"
        )
    if problems:
        raise BudgetMismatch("; ".join(problems))


def paired_schedule(cfg: MaeConfig, budget: ComputeBudget, paired: JepaConfig) -> LrSchedule:
    """Same warmup/cooldown fractions as the paired run, stretched to the budgeted update count."""
    ref = paired.schedule()
    n = budget.actual_updates
    return LrSchedule(
        total=n,
        warmup=int(round(ref.warmup / ref.total * n)),
        cooldown=int(round(ref.cooldown / ref.total * n)),
        lr=cfg.lr,
        final_lr=cfg.final_lr,
    )


def train(videos: np.ndarray, cfg: MaeConfig, budget: ComputeBudget, paired: JepaConfig, state: MaeState | None = None):
    """Run ``budget.actual_updates`` steps of masked pixel regression; returns (state, curve)."""
    if len(videos) == 0:
        raise ValueError("train: empty dataset")
    check_parity(cfg, budget, paired, len(videos))
    rng = np.random.default_rng([cfg.seed, 13])
    state = state or MaeState(cfg)
    opt = AdamW(state.trainable(), betas=cfg.betas)
    sched = paired_schedule(cfg, budget, paired)
    grid = cfg.encoder.grid(*videos.shape[1:])
    batches = epoch_batches(len(videos), cfg.batch_size, rng)
    curve = []
    for step in range(budget.actual_updates):
        idx = next(batches)
        batch = augment_batch(videos[idx], rng, cfg.crop_scale, cfg.crop_aspect)
        masks = tube_mask(grid, cfg.mask_ratio, rng)
        opt.zero_grad()
        loss = mae_loss(state, batch, masks)
        lv = loss.item()
        if not math.isfinite(lv):
            raise NonFiniteLoss(f"non-finite MAE loss {lv} at update {step}; lr={sched(step):.3e}")
        T.backward(loss)
        lr = sched(step)
        opt.step(lr, cfg.weight_decay)
        state.step += 1
        if (step + 1) % cfg.log_every == 0:
            with T.no_grad():
                emb = state.encoder(batch).data.mean(axis=1)
            stats = collapse_metrics(emb)
            curve.append({"update": step + 1, "loss": lv, "lr": lr, "min_std": stats["min_std"]})
            log.info("mae update %d loss %.5f lr %.2e", step + 1, lv, lr)
    return state, curve
