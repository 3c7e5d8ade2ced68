"""Experiment orchestration: datasets, paired pretraining, probing, sweeps and metrics."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container, jepa, mae, perturb
from . import tensor as T
from .config import ExperimentConfig, FeatureConfig
from .probe import (
    ProbeData,
    ProbeProtocol,
    TaskSpec,
    TrainedProbe,
    label_fraction_subset,
    late_fusion_baseline,
    late_fusion_predict,
    task_metric,
    train_probe,
    write_grid_report,
)
from .synth import LabelRow, SynthConfig, default_geometry, generate_dataset, geometric_sector_mask, load_dataset
from .training import collapse_metrics, write_curve
from .vit import VideoEncoder

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "DESKJEPA_RUNS"
METRICS_HEADER = ("experiment", "model", "task", "perturbation", "severity", "label_fraction", "seed", "metric", "value")
RV_VIEWS = (0, 2)
N_VIEW_CLASSES = 3


# -- run directories ------------------------------------------------------------

def run_root(out: str | os.PathLike | None = None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def prepare_run_dir(out, cfg: ExperimentConfig | None) -> Path:
    """Create the run directory and write the resolved config snapshot."""
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (path / "config.yaml").write_text(cfg.to_yaml())
    return path


# -- metrics ---------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    model: str
    task: str
    perturbation: str
    severity: str
    label_fraction: float
    seed: int
    metric: str
    value: float

    def as_list(self) -> list[str]:
        return [
            self.experiment, self.model, self.task, self.perturbation, self.severity,
            repr(float(self.label_fraction)), str(self.seed), self.metric, repr(float(self.value)),
        ]


def write_metrics(path, rows: Iterable[MetricsRow], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        return [
            MetricsRow(
                r["experiment"], r["model"], r["task"], r["perturbation"], r["severity"],
                float(r["label_fraction"]), int(r["seed"]), r["metric"], float(r["value"]),
            )
            for r in reader
        ]


def relative_degradation(clean: float, perturbed: float, metric: str) -> float:
    """Relative error increase (lower-is-better metrics) or relative accuracy drop."""
    if clean == 0:
        raise ValueError("relative degradation undefined for a zero clean metric")
    if metric == "accuracy":
        return 1.0 - perturbed / clean
    return perturbed / clean - 1.0


def avg_degradation(rows: Sequence[MetricsRow], model: str, task: str, seed: int) -> float:
    """Mean relative degradation over every perturbed cell, recomputed from metrics rows."""
    sel = [r for r in rows if r.model == model and r.task == task and r.seed == seed and r.metric != "avg_degradation"]
    clean = [r for r in sel if r.perturbation == "none"]
    if len(clean) != 1:
        raise ValueError(f"expected one clean row for {model}/{task}/seed {seed}, found {len(clean)}")
    cells = [r for r in sel if r.perturbation != "none" and r.metric == clean[0].metric]
    if not cells:
        raise ValueError(f"no perturbed rows for {model}/{task}/seed {seed}")
    return float(np.mean([relative_degradation(clean[0].value, r.value, r.metric) for r in cells]))


# -- data ------------------------------------------------------------------------

def ensure_dataset(cfg: SynthConfig, root) -> tuple[list[LabelRow], np.ndarray]:
    """Generate the dataset once under ``root`` (reused when the label table matches)."""
    root = Path(root)
    if not (root / "labels.csv").exists():
        generate_dataset(cfg, root)
    return load_dataset(root)


def split_indices(rows: Sequence[LabelRow], split: str) -> np.ndarray:
    return np.array([i for i, r in enumerate(rows) if r.split == split], dtype=np.intp)


def scan_mask(video: np.ndarray, mode: str) -> np.ndarray | None:
    if mode == "full":
        return None
    if mode == "sector":
        H, W = video.shape[-2:]
        return geometric_sector_mask(default_geometry(H, W), H, W)
    if mode == "auto":
        return perturb.auto_scan_mask(video.mean(axis=0))
    raise ValueError(f"unknown mask mode {mode!r}; expected auto, sector or full")


def perturbed_copies(
    videos: np.ndarray, ids: Sequence[str], presets: Sequence[str], mask_mode: str = "sector", seed: int = 0
) -> dict[str, np.ndarray]:
    """One stored perturbed copy of ``videos`` per preset; per-clip seeds hash the clip id."""
    out = {}
    for name in presets:
        spec = perturb.get_preset(name)
        out[name] = np.stack([
            perturb.compose([spec], v, scan_mask(v, mask_mode), seed=perturb.seed_from_name(f"{cid}") ^ seed)
            for v, cid in zip(videos, ids)
        ]).astype(np.float32)
    return out


def preset_label(name: str) -> tuple[str, str]:
    spec = perturb.get_preset(name)
    if spec.kind == "depth_linear":
        return spec.kind, repr(spec.params["alpha"])
    if spec.kind == "shadow_band":
        return spec.kind, repr(spec.params["sigma"])
    return spec.kind, name.lower()


# -- frozen features -------------------------------------------------------------

def pool_tokens(tokens: np.ndarray, grid, pool) -> np.ndarray:
    """Average-pool (B, N, D) tokens on their (t, h, w) grid by integer factors."""
    B, N, D = tokens.shape
    nt, nh, nw = grid
    ft, fh, fw = pool
    if nt % ft or nh % fh or nw % fw:
        raise ValueError(f"pool factors {pool} do not divide the token grid {grid}")
    x = tokens.reshape(B, nt // ft, ft, nh // fh, fh, nw // fw, fw, D)
    return x.mean(axis=(2, 4, 6)).reshape(B, -1, D)


def extract_features(encoder: VideoEncoder, videos: np.ndarray, fcfg: FeatureConfig) -> np.ndarray:
    """Frozen (n, N_E, D) features; no graph is recorded."""
    grid = encoder.cfg.grid(*videos.shape[1:])
    out = []
    with T.no_grad():
        for i in range(0, len(videos), fcfg.batch_size):
            tok = encoder(videos[i:i + fcfg.batch_size]).data
            out.append(pool_tokens(tok, grid, fcfg.pool))
    return np.concatenate(out).astype(np.float32)


def param_checksum(module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- task datasets ---------------------------------------------------------------

def clip_task_data(feats: np.ndarray, rows: Sequence[LabelRow], idx: np.ndarray, task: str) -> ProbeData:
    """Single-clip studies (V = C = 1) for the per-clip tasks."""
    idx = np.asarray(idx, dtype=np.intp)
    if task == "ef":
        targets = np.array([rows[i].ef for i in idx])
    elif task == "view":
        targets = np.array([rows[i].view_class for i in idx])
    else:
        raise ValueError(f"unknown clip task {task!r}")
    return ProbeData(feats[idx][:, None, None], np.ones((len(idx), 1), dtype=bool), targets, [rows[i].id for i in idx])


def study_task_data(feats: np.ndarray, rows: Sequence[LabelRow], split: str, views=RV_VIEWS) -> ProbeData:
    """Two-view studies for the composite target; views missing from the split are flagged."""
    groups: dict[int, dict[int, int]] = {}
    for i, r in enumerate(rows):
        if r.split == split and r.view_class in views:
            groups.setdefault(r.study, {})[r.view_class] = i
    studies = sorted(groups)
    N, D = feats.shape[1:]
    X = np.zeros((len(studies), len(views), 1, N, D), dtype=np.float32)
    avail = np.zeros((len(studies), len(views)), dtype=bool)
    targets = np.zeros(len(studies))
    for si, s in enumerate(studies):
        for vi, v in enumerate(views):
            if v in groups[s]:
                X[si, vi, 0] = feats[groups[s][v]]
                avail[si, vi] = True
                targets[si] = rows[groups[s][v]].rv
    return ProbeData(X, avail, targets, [f"s{s:05d}" for s in studies])


def drop_views(data: ProbeData, rate: float, seed: int) -> ProbeData:
    """Test-time missing views: each two-view study loses one random view with probability ``rate``."""
    rng = np.random.default_rng([seed, 37])
    avail = data.avail.copy()
    for i in range(len(data)):
        if avail[i].sum() > 1 and rng.random() < rate:
            avail[i, rng.choice(np.flatnonzero(avail[i]))] = False
    return data.with_avail(avail)


# -- pretraining -----------------------------------------------------------------

@dataclass
class PretrainResult:
    jepa_state: jepa.JepaState
    mae_state: mae.MaeState
    jepa_curve: list[dict]
    mae_curve: list[dict]
    budget: mae.ComputeBudget


def pretrain_pair(train_videos: np.ndarray, cfg: ExperimentConfig) -> PretrainResult:
    js, jcurve = jepa.train(train_videos, cfg.jepa)
    budget = mae.paired_budget(cfg.jepa, len(train_videos))
    ms, mcurve = mae.train(train_videos, cfg.mae, budget, cfg.jepa)
    return PretrainResult(js, ms, jcurve, mcurve, budget)


def eval_encoders(result: PretrainResult) -> dict[str, VideoEncoder]:
    """The EMA target encoder is the latent-prediction model's evaluated backbone."""
    return {"jepa": result.jepa_state.target, "mae": result.mae_state.encoder}


def save_checkpoint(path, state) -> None:
    container.write(path, tensors=state.state_dict())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    _, tensors = container.read(path)
    if not tensors:
        raise container.ContainerError(f"{path} holds no tensors")
    return tensors


# -- evaluation protocol ---------------------------------------------------------

def robustness_rows(
    probe: TrainedProbe, clean: ProbeData, perturbed: dict[str, ProbeData],
    experiment: str, model: str, task: str, seed: int,
) -> list[MetricsRow]:
    """Clean row first, then one row per perturbed copy, then the average degradation."""
    metric = "mae" if probe.task.kind == "regression" else "accuracy"
    rows = [MetricsRow(experiment, model, task, "none", "0", 1.0, seed, metric, probe.evaluate(clean))]
    for name, data in perturbed.items():
        kind, sev = preset_label(name)
        rows.append(MetricsRow(experiment, model, task, kind, sev, 1.0, seed, metric, probe.evaluate(data)))
    deg = float(np.mean([relative_degradation(rows[0].value, r.value, metric) for r in rows[1:]]))
    rows.append(MetricsRow(experiment, model, task, "all", "avg", 1.0, seed, "avg_degradation", deg))
    return rows


def robustness_sweep(
    probe: TrainedProbe, encoder: VideoEncoder, test_videos: np.ndarray, test_rows: Sequence[LabelRow],
    copies: dict[str, np.ndarray], fcfg: FeatureConfig, experiment: str, model: str, seed: int,
) -> list[MetricsRow]:
    """Evaluate a frozen EF probe on the clean test clips and on each stored perturbed copy."""
    idx = np.arange(len(test_rows))
    clean = clip_task_data(extract_features(encoder, test_videos, fcfg), test_rows, idx, "ef")
    pert = {
        name: clip_task_data(extract_features(encoder, vids, fcfg), test_rows, idx, "ef")
        for name, vids in copies.items()
    }
    return robustness_rows(probe, clean, pert, experiment, model, "ef", seed)


@dataclass
class SeedOutcome:
    rows: list[MetricsRow]
    features: dict[str, np.ndarray]
    collapse: dict[str, float]
    checksums_ok: bool


def evaluate_backbones(
    encoders: dict[str, VideoEncoder],
    rows: Sequence[LabelRow],
    videos: np.ndarray,
    copies: dict[str, np.ndarray],
    cfg: ExperimentConfig,
    seed: int,
    experiment: str = "main",
    out_dir: Path | None = None,
) -> SeedOutcome:
    """Identical probe protocol for every backbone: EF regression (clean + robustness)
    and view classification at each label fraction."""
    protocol = cfg.probe.protocol
    fcfg = cfg.probe.features
    tr, va, te = (split_indices(rows, s) for s in ("train", "val", "test"))
    test_rows = [rows[i] for i in te]
    metrics: list[MetricsRow] = []
    features: dict[str, np.ndarray] = {}
    collapse = {}
    checks = True
    reg, cls = TaskSpec("regression"), TaskSpec("classification", N_VIEW_CLASSES)
    for model, enc in encoders.items():
        before = param_checksum(enc)
        feats = extract_features(enc, videos, fcfg)
        features[model] = feats
        collapse[model] = collapse_metrics(feats[tr].mean(axis=1))["min_std"]
        grid = train_probe(clip_task_data(feats, rows, tr, "ef"), clip_task_data(feats, rows, va, "ef"), reg, protocol, seed)
        if out_dir is not None:
            write_grid_report(out_dir / f"grid_{model}_ef.csv", grid.rows)
        pert = {
            name: clip_task_data(extract_features(enc, vids, fcfg), test_rows, np.arange(len(te)), "ef")
            for name, vids in copies.items()
        }
        clean = clip_task_data(feats, rows, te, "ef")
        metrics += robustness_rows(grid.best, clean, pert, experiment, model, "ef", seed)
        val_view = clip_task_data(feats, rows, va, "view")
        for frac in cfg.sweep.label_fractions:
            sub = tr[label_fraction_subset(len(tr), frac, seed)]
            g = train_probe(clip_task_data(feats, rows, sub, "view"), val_view, cls, protocol, seed)
            if out_dir is not None:
                write_grid_report(out_dir / f"grid_{model}_view_{frac:g}.csv", g.rows)
            acc = g.best.evaluate(clip_task_data(feats, rows, te, "view"))
            metrics.append(MetricsRow(experiment, model, "view", "none", "0", frac, seed, "accuracy", acc))
        metrics.append(MetricsRow(experiment, model, "pretrain", "none", "0", 1.0, seed, "min_std", collapse[model]))
        checks &= param_checksum(enc) == before
    return SeedOutcome(metrics, features, collapse, checks)


def run_ablations(
    feats: np.ndarray, rows: Sequence[LabelRow], protocol: ProbeProtocol, seed: int,
    missing_rate: float = 0.5, model: str = "jepa", experiment: str = "ablation",
) -> list[MetricsRow]:
    """Two-view composite task: early fusion vs late averaging, view dropout on/off,
    and stream embeddings on/off. Test MAE on complete studies and with views removed."""
    train, val, test = (study_task_data(feats, rows, s) for s in ("train", "val", "test"))
    test_missing = drop_views(test, missing_rate, seed)
    reg = TaskSpec("regression")
    out = []

    def emit(variant: str, metric: str, value: float):
        out.append(MetricsRow(experiment, model, "rv", variant, "0", 1.0, seed, metric, value))

    variants = {
        "early": protocol,
        "early_no_dropout": dataclasses.replace(protocol, p_miss=0.0),
        "early_no_stream_embed": dataclasses.replace(protocol, stream_embeddings=False),
    }
    for name, prot in variants.items():
        best = train_probe(train, val, reg, prot, seed).best
        emit(name, "val_mae", best.evaluate(val))
        emit(name, "test_mae", best.evaluate(test))
        emit(name, "masked_test_mae", best.evaluate(test_missing))
    late = late_fusion_baseline(train, val, reg, protocol, seed)
    for label, data in (("val_mae", val), ("test_mae", test), ("masked_test_mae", test_missing)):
        emit("late", label, task_metric(reg, late_fusion_predict(late, data), data.targets))
    return out


# -- whole experiment ------------------------------------------------------------

def run_experiment(
    cfg: ExperimentConfig, out_dir, seeds: Sequence[int] | None = None, ablations: bool = True,
    dataset_dir=None,
) -> list[MetricsRow]:
    """Dataset, then per seed: paired pretraining, probe evaluation, robustness and ablations.

    Perturbed test copies are generated once and shared by every model and seed.
    """
    from .config import with_seed

    out = prepare_run_dir(out_dir, cfg)
    rows, videos = ensure_dataset(cfg.data, dataset_dir or out / "data")
    videos = videos.astype(np.float32)
    te = split_indices(rows, "test")
    copies = perturbed_copies(videos[te], [rows[i].id for i in te], cfg.perturb.grid, cfg.perturb.mask, cfg.perturb.seed)
    tr = split_indices(rows, "train")
    all_rows: list[MetricsRow] = []
    for seed in seeds if seeds is not None else cfg.sweep.seeds:
        scfg = with_seed(cfg, seed)
        sdir = out / f"seed{seed}"
        sdir.mkdir(exist_ok=True)
        res = pretrain_pair(videos[tr], scfg)
        write_curve(sdir / "curve_jepa.csv", res.jepa_curve)
        write_curve(sdir / "curve_mae.csv", res.mae_curve)
        save_checkpoint(sdir / "jepa.ecv", res.jepa_state)
        save_checkpoint(sdir / "mae.ecv", res.mae_state)
        outcome = evaluate_backbones(eval_encoders(res), rows, videos, copies, scfg, seed, out_dir=sdir)
        seed_rows = outcome.rows
        if ablations:
            seed_rows += run_ablations(outcome.features["jepa"], rows, scfg.probe.protocol, seed, cfg.sweep.rv_missing_rate)
        write_metrics(sdir / "metrics.csv", seed_rows)
        all_rows += seed_rows
    write_metrics(out / "metrics.csv", all_rows)
    return all_rows


# -- plots -----------------------------------------------------------------------

def plot_curves(curves: dict[str, Path], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, csv_path in curves.items():
        with open(csv_path, newline="") as fh:
            recs = list(csv.DictReader(fh))
        ax.plot([int(r["update"]) for r in recs], [float(r["loss"]) for r in recs], label=label)
    ax.set_xlabel("update")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_degradation(rows: Sequence[MetricsRow], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    models = sorted({r.model for r in rows if r.metric == "avg_degradation"})
    seeds = sorted({r.seed for r in rows if r.metric == "avg_degradation"})
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.8 / max(len(models), 1)
    for k, m in enumerate(models):
        vals = [next((r.value for r in rows if r.model == m and r.seed == s and r.metric == "avg_degradation"), np.nan) for s in seeds]
        ax.bar(np.arange(len(seeds)) + k * width, vals, width, label=m)
    ax.set_xticks(np.arange(len(seeds)) + width * (len(models) - 1) / 2)
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel("avg relative degradation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
