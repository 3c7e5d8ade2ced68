"""Attentive probing of a frozen encoder over multi-view studies.

Streams are (view, clip) pairs laid out view-major, clip-minor. Missing views keep
their zero-filled token blocks in the sequence and are excluded through a key
padding mask, so every tensor in a batch has the same shape.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .optim import AdamW
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class Study:
    """Clips keyed by view label; ``views`` fixes the task's view order."""

    id: str
    views: tuple[int, ...]
    clips: dict[int, np.ndarray]
    target: float | int = 0.0

    @property
    def availability(self) -> np.ndarray:
        return np.array([v in self.clips for v in self.views], dtype=bool)


@dataclass(frozen=True)
class StreamLayout:
    V: int
    C: int
    N_E: int
    D: int

    @property
    def L(self) -> int:
        return self.V * self.C

    @property
    def total_tokens(self) -> int:
        return self.L * self.N_E

    def stream_ids(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-token (view index, clip index), matching the concatenation order."""
        view = np.repeat(np.arange(self.V), self.C * self.N_E)
        clip = np.tile(np.repeat(np.arange(self.C), self.N_E), self.V)
        return view, clip


@dataclass(frozen=True)
class ProbeProtocol:
    depth: int = 4
    heads: int = 16
    mlp_ratio: float = 4.0
    lrs: tuple[float, ...] = (1e-4, 5e-5)
    weight_decays: tuple[float, ...] = (0.01, 0.1, 0.4)
    lr_scale: float = 1.0
    p_miss: float = 0.1
    stream_embeddings: bool = True
    batch_size: int = 32
    epochs: int = 20
    min_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def grid(self) -> list[tuple[float, float]]:
        return [(lr * self.lr_scale, wd) for lr, wd in itertools.product(self.lrs, self.weight_decays)]

    def serialize(self) -> str:
        """Canonical text form; two backbones compared under one protocol share these bytes."""
        d = asdict(self)
        return "\n".join(f"{k}={d[k]!r}" for k in sorted(d)) + "\n"


# -- stream assembly -------------------------------------------------------------

def clip_offsets(n_frames: int, C: int, rng: np.random.Generator | None) -> np.ndarray:
    """C distinct temporal start offsets; a single clip always starts at frame 0."""
    if C > n_frames:
        raise ValueError(f"cannot draw {C} distinct clips from {n_frames} frames")
    if C == 1 or rng is None:
        return np.arange(C) * (n_frames // C)
    return np.sort(rng.choice(n_frames, size=C, replace=False))


def assemble_streams(
    study: Study,
    layout: StreamLayout,
    encode: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ((L*N_E, D) tokens, (V,) availability) for one study.

    ``encode`` maps a (T, H, W) clip to frozen (N_E, D) features and is never
    differentiated through. Clips beyond the first are circular temporal shifts.
    """
    if len(study.views) != layout.V:
        raise ValueError(f"study {study.id} has {len(study.views)} task views, layout expects {layout.V}")
    m = study.availability
    if not m.any():
        raise ValueError(f"study {study.id}: no available views")
    X = np.zeros((layout.V, layout.C, layout.N_E, layout.D), dtype=np.float32)
    for vi, view in enumerate(study.views):
        if not m[vi]:
            continue
        video = study.clips[view]
        for ci, off in enumerate(clip_offsets(video.shape[0], layout.C, rng)):
            feats = np.asarray(encode(np.roll(video, -int(off), axis=0)))
            if feats.shape != (layout.N_E, layout.D):
                raise ValueError(f"encoder returned {feats.shape}, layout expects {(layout.N_E, layout.D)}")
            X[vi, ci] = feats
    return X.reshape(layout.total_tokens, layout.D), m


@dataclass
class ProbeData:
    """Precomputed frozen features for a set of studies."""

    features: np.ndarray  # (S, V, C, N_E, D)
    avail: np.ndarray  # (S, V) bool
    targets: np.ndarray  # (S,)
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def layout(self) -> StreamLayout:
        S, V, C, N, D = self.features.shape
        return StreamLayout(V, C, N, D)

    def subset(self, idx) -> "ProbeData":
        idx = np.asarray(idx, dtype=np.intp)
        return ProbeData(self.features[idx], self.avail[idx], self.targets[idx], [self.ids[i] for i in idx] if self.ids else [])

    def with_avail(self, avail: np.ndarray) -> "ProbeData":
        return ProbeData(self.features, np.asarray(avail, dtype=bool), self.targets, self.ids)

    def view(self, v: int) -> "ProbeData":
        """Single-view slice; studies lacking the view are kept but flagged unavailable."""
        return ProbeData(self.features[:, v:v + 1], self.avail[:, v:v + 1], self.targets, self.ids)


def build_probe_data(studies: Sequence[Study], layout: StreamLayout, encode, seed: int = 0) -> ProbeData:
    rng = np.random.default_rng([seed, 23])
    feats, avail = [], []
    for s in studies:
        X, m = assemble_streams(s, layout, encode, rng)
        feats.append(X.reshape(layout.V, layout.C, layout.N_E, layout.D))
        avail.append(m)
    return ProbeData(
        np.stack(feats), np.stack(avail), np.asarray([s.target for s in studies]), [s.id for s in studies]
    )


def label_fraction_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """floor(fraction * n) indices (at least one), drawn without replacement."""
    k = max(1, int(np.floor(fraction * n + 1e-9)))
    k = min(k, n)
    return np.sort(np.random.default_rng([seed, 29]).permutation(n)[:k])


# -- probe parameters ------------------------------------------------------------

def view_dropout(m: np.ndarray, p_miss: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each available view with probability p_miss; if none survive, restore one at random."""
    m = np.asarray(m, dtype=bool)
    if p_miss <= 0:
        return m.copy()
    drop = rng.random(m.shape) < p_miss
    out = m & ~drop
    if m.ndim == 1:
        if m.any() and not out.any():
            out[rng.choice(np.flatnonzero(m))] = True
        return out
    for i in np.flatnonzero(m.any(axis=1) & ~out.any(axis=1)):
        out[i, rng.choice(np.flatnonzero(m[i]))] = True
    return out


class CrossAttention(nn.Module):
    """Learnable queries attend over a token sequence."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim, rng)
        self.kv = nn.Linear(dim, 2 * dim, rng)
        self.proj = nn.Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        B, N, D = x.shape
        Q = query.shape[1]
        H = self.heads
        q = self.q(query).reshape(B, Q, H, D // H).transpose(0, 2, 1, 3)
        kv = self.kv(x).reshape(B, N, 2, H, D // H).transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        scores = T.matmul(T.scale(q, 1.0 / np.sqrt(D // H)), T.swapaxes(k, -1, -2))
        if key_bias is not None:
            scores = scores + Tensor(key_bias)
        attn = T.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Q, D)
        return self.proj(out)


class AttentivePooler(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.query = nn.parameter(nn.trunc_normal(rng, (1, 1, dim)))
        self.norm1 = nn.LayerNorm(dim)
        self.xattn = CrossAttention(dim, heads, rng)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.MLP(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None) -> Tensor:
        B = x.shape[0]
        q = Tensor(np.zeros((B, 1, x.shape[2]), dtype=x.dtype)) + self.query
        q = q + self.xattn(q, self.norm1(x), key_bias)
        q = q + self.mlp(self.norm2(q))
        return q.reshape(B, x.shape[2])


class ProbeParams(nn.Module):
    """Stream embeddings, R-1 self-attention blocks, cross-attention pooler and linear head."""

    def __init__(self, layout: StreamLayout, protocol: ProbeProtocol, n_out: int, rng: np.random.Generator):
        D = layout.D
        self.layout = layout
        self.view_embed = nn.parameter(nn.trunc_normal(rng, (layout.V, D)))
        self.clip_embed = nn.parameter(nn.trunc_normal(rng, (layout.C, D)))
        if not protocol.stream_embeddings:
            self.view_embed.data[:] = 0
            self.clip_embed.data[:] = 0
            self.view_embed.requires_grad = False
            self.clip_embed.requires_grad = False
        self.blocks = [nn.Block(D, protocol.heads, protocol.mlp_ratio, rng) for _ in range(protocol.depth - 1)]
        self.pooler = AttentivePooler(D, protocol.heads, protocol.mlp_ratio, rng)
        self.head = nn.Linear(D, n_out, rng)
        if self.stream_param_count() != (layout.V + layout.C) * D:
            raise AssertionError("stream embeddings are not factorized")

    def stream_param_count(self) -> int:
        return self.view_embed.size + self.clip_embed.size


def add_stream_embeddings(X, layout: StreamLayout, params: ProbeParams) -> Tensor:
    """X_i + E_view[v(i)] + E_clip[c(i)] for tokens laid out per ``layout``."""
    view, clip = layout.stream_ids()
    offset = T.take(params.view_embed, view, axis=0) + T.take(params.clip_embed, clip, axis=0)
    return T.as_tensor(X) + offset


def token_validity(avail: np.ndarray, layout: StreamLayout) -> np.ndarray:
    """(B, V) view availability -> (B, L*N_E) token validity."""
    return np.repeat(np.asarray(avail, dtype=bool), layout.C * layout.N_E, axis=1)


def probe_forward(X: np.ndarray, avail: np.ndarray, params: ProbeParams) -> Tensor:
    """(B, L*N_E, D) frozen features and (B, V) availability -> (B, n_out)."""
    layout = params.layout
    avail = np.asarray(avail, dtype=bool)
    if not avail.any(axis=1).all():
        raise ValueError("probe_forward: every study needs at least one available view")
    valid = token_validity(avail, layout)[..., None]
    # zero the placeholders first so masked contents cannot reach any arithmetic
    x = T.where(valid, add_stream_embeddings(T.where(valid, X), layout, params))
    bias = nn.attention_bias(valid[..., 0], x.dtype)
    for blk in params.blocks:
        x = T.where(valid, blk(x, bias))
    h = params.pooler(x, bias)
    return params.head(h)


# -- training --------------------------------------------------------------------

def feature_stats(data: ProbeData) -> tuple[np.ndarray, np.ndarray]:
    """Per (view, dim) mean and std over available studies, clips and tokens; shape (V, 1, 1, D).

    Frozen features of different backbones live on very different scales. One shared
    statistic per view and channel (no learned affine) puts them on a common footing
    while keeping the position-dependent structure the encoder put into its tokens.
    """
    f = data.features.astype(np.float64)
    S, V, C, N, D = f.shape
    w = data.avail.astype(np.float64)[:, :, None, None, None]
    n = w.sum(axis=0, keepdims=True).sum(axis=(2, 3), keepdims=True)[0] * C * N
    mu = (f * w).sum(axis=(0, 2, 3), keepdims=True)[0] / np.maximum(n, 1)
    var = (((f - mu) ** 2) * w).sum(axis=(0, 2, 3), keepdims=True)[0] / np.maximum(n, 1)
    sd = np.sqrt(var)
    sd = np.where((sd > 1e-6) & (n > 1), sd, 1.0)
    return mu.astype(np.float32), sd.astype(np.float32)


def _batch_inputs(data: ProbeData, idx, stats=None) -> np.ndarray:
    S, V, C, N, D = data.features.shape
    x = data.features[idx]
    if stats is not None:
        x = (x - stats[0]) / stats[1]
    return x.reshape(len(idx), V * C * N, D)


@dataclass
class TaskSpec:
    kind: str  # "regression" | "classification"
    n_classes: int = 0

    @property
    def n_out(self) -> int:
        return 1 if self.kind == "regression" else self.n_classes


class TrainedProbe:
    def __init__(self, params: ProbeParams, task: TaskSpec, mu: float = 0.0, sd: float = 1.0, stats=None):
        self.params = params
        self.task = task
        self.mu = mu
        self.sd = sd
        self.stats = stats

    def predict(self, data: ProbeData, batch_size: int = 128) -> np.ndarray:
        outs = []
        with T.no_grad():
            for i in range(0, len(data), batch_size):
                idx = np.arange(i, min(i + batch_size, len(data)))
                outs.append(probe_forward(_batch_inputs(data, idx, self.stats), data.avail[idx], self.params).data)
        out = np.concatenate(outs) if outs else np.zeros((0, self.task.n_out))
        if self.task.kind == "regression":
            return out[:, 0].astype(np.float64) * self.sd + self.mu
        return out

    def evaluate(self, data: ProbeData) -> float:
        return task_metric(self.task, self.predict(data), data.targets)


def task_metric(task: TaskSpec, pred: np.ndarray, targets: np.ndarray) -> float:
    """Mean absolute error for regression, top-1 accuracy for classification."""
    if task.kind == "regression":
        return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - targets)))
    return float(np.mean(np.argmax(pred, axis=1) == np.asarray(targets)))


def better(task: TaskSpec, a: float, b: float) -> bool:
    return a < b if task.kind == "regression" else a > b


def fit_probe(
    train: ProbeData, task: TaskSpec, protocol: ProbeProtocol, lr: float, wd: float, seed: int
) -> TrainedProbe:
    """One grid cell: AdamW on MSE (standardised targets) or cross-entropy."""
    rng = np.random.default_rng([seed, 31])
    params = ProbeParams(train.layout, protocol, task.n_out, rng)
    mu, sd = 0.0, 1.0
    if task.kind == "regression":
        mu = float(train.targets.mean())
        sd = float(train.targets.std()) or 1.0
    targets = (train.targets - mu) / sd if task.kind == "regression" else train.targets.astype(int)
    stats = feature_stats(train)
    opt = AdamW(params.parameters(), betas=protocol.betas)
    n = len(train)
    bs = min(protocol.batch_size, n)
    steps = max(protocol.epochs * n // bs, protocol.min_steps)
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + bs > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + bs]
        pos += bs
        avail = view_dropout(train.avail[idx], protocol.p_miss, rng)
        opt.zero_grad()
        out = probe_forward(_batch_inputs(train, idx, stats), avail, params)
        if task.kind == "regression":
            loss = T.mse_loss(out.reshape(len(idx)), Tensor(targets[idx].astype(out.dtype)))
        else:
            loss = T.cross_entropy(out, targets[idx])
        T.backward(loss)
        opt.step(lr, wd)
    return TrainedProbe(params, task, mu, sd, stats)


REPORT_HEADER = ("lr", "wd", "seed", "metric", "best")


@dataclass
class GridResult:
    best: TrainedProbe
    best_cell: tuple[float, float]
    rows: list[dict]


def train_probe(
    train: ProbeData, val: ProbeData, task: TaskSpec, protocol: ProbeProtocol, seed: int | None = None
) -> GridResult:
    """Fit every (lr, wd) cell, keep the best validation metric."""
    seed = protocol.seed if seed is None else seed
    rows, best, best_metric, best_cell = [], None, None, None
    for lr, wd in protocol.grid():
        probe = fit_probe(train, task, protocol, lr, wd, seed)
        metric = probe.evaluate(val)
        rows.append({"lr": lr, "wd": wd, "seed": seed, "metric": metric, "best": False})
        log.info("probe cell lr=%.2e wd=%.2f val=%.5f", lr, wd, metric)
        if best is None or better(task, metric, best_metric):
            best, best_metric, best_cell = probe, metric, (lr, wd)
    for r in rows:
        r["best"] = (r["lr"], r["wd"]) == best_cell
    return GridResult(best, best_cell, rows)


def write_grid_report(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([f"{r['lr']:.6g}", f"{r['wd']:.6g}", r["seed"], f"{r['metric']:.8e}", int(r["best"])])


def late_fusion_predict(probes: Sequence[TrainedProbe], data: ProbeData) -> np.ndarray:
    """Average of per-view regression predictions over each study's available views."""
    if len(probes) != data.layout.V:
        raise ValueError(f"need one probe per view ({data.layout.V}), got {len(probes)}")
    w = data.avail.astype(np.float64)
    if not (w.sum(axis=1) > 0).all():
        raise ValueError("late fusion: a study has no available views")
    preds = np.zeros(data.avail.shape)
    for v, p in enumerate(probes):
        has = np.flatnonzero(data.avail[:, v])
        if len(has):
            preds[has, v] = p.predict(data.view(v).subset(has))
    return (preds * w).sum(axis=1) / w.sum(axis=1)


def late_fusion_baseline(
    train: ProbeData, val: ProbeData, task: TaskSpec, protocol: ProbeProtocol, seed: int | None = None
) -> list[TrainedProbe]:
    """One single-view probe per task view, each trained on studies where that view exists."""
    probes = []
    for v in range(train.layout.V):
        tr = train.view(v)
        va = val.view(v)
        keep_tr = np.flatnonzero(tr.avail[:, 0])
        keep_va = np.flatnonzero(va.avail[:, 0])
        single = ProbeProtocol(**{**asdict(protocol), "p_miss": 0.0})
        probes.append(train_probe(tr.subset(keep_tr), va.subset(keep_va), task, single, seed).best)
    return probes
