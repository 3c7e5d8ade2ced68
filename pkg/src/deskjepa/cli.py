"""Command line entry point: ``deskjepa <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import container, harness, jepa, mae, perturb
from .probe import ProbeParams, StreamLayout, TaskSpec, TrainedProbe, train_probe, write_grid_report
from .synth import SynthConfig, generate_dataset, load_dataset
from .training import write_curve
from .vit import VideoEncoder

log = logging.getLogger("deskjepa")

TASKS = {"ef": TaskSpec("regression"), "view": TaskSpec("classification", harness.N_VIEW_CLASSES), "rv": TaskSpec("regression")}


class CliError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides every model-side seed")
    p.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    p.add_argument("--out", type=Path, default=None, help=f"run directory (default: ${harness.RUN_ROOT_ENV}/<subcommand>)")


def _resolve(args, name: str) -> tuple[C.ExperimentConfig, Path]:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    if args.seed is not None:
        cfg = C.with_seed(cfg, args.seed)
    out = args.out if args.out is not None else harness.run_root() / name
    return cfg, out


def _load_videos(data_dir: Path, split: str | None = None):
    if not (data_dir / "labels.csv").exists():
        raise CliError(f"dataset not found: {data_dir / 'labels.csv'}")
    rows, videos = load_dataset(data_dir)
    videos = videos.astype(np.float32)
    if split is None:
        return rows, videos
    idx = harness.split_indices(rows, split)
    return [rows[i] for i in idx], videos[idx]


def _load_encoder(path: Path, cfg: C.ExperimentConfig) -> VideoEncoder:
    if not path.exists():
        raise CliError(f"missing checkpoint: {path}")
    tensors = harness.load_checkpoint(path)
    enc = VideoEncoder(cfg.jepa.encoder, np.random.default_rng(0))
    for prefix in ("target.", "encoder."):
        sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        if sub:
            enc.load_state_dict(sub)
            enc.freeze()
            return enc
    raise CliError(f"{path} holds no encoder parameters")


def _save_probe(path: Path, probe: TrainedProbe) -> None:
    lay = probe.params.layout
    tensors = {f"param.{k}": v for k, v in probe.params.state_dict().items()}
    tensors["meta.layout"] = np.array([lay.V, lay.C, lay.N_E, lay.D], dtype=np.float32)
    tensors["meta.target"] = np.array([probe.mu, probe.sd], dtype=np.float32)
    tensors["meta.stats_mu"], tensors["meta.stats_sd"] = probe.stats
    container.write(path, tensors=tensors)


def _load_probe(path: Path, task: TaskSpec, cfg: C.ExperimentConfig) -> TrainedProbe:
    if not path.exists():
        raise CliError(f"missing probe checkpoint: {path}")
    t = harness.load_checkpoint(path)
    V, Cc, N, D = (int(x) for x in t["meta.layout"])
    params = ProbeParams(StreamLayout(V, Cc, N, D), cfg.probe.protocol, task.n_out, np.random.default_rng(0))
    params.load_state_dict({k[6:]: v for k, v in t.items() if k.startswith("param.")})
    mu, sd = (float(x) for x in t["meta.target"])
    return TrainedProbe(params, task, mu, sd, (t["meta.stats_mu"], t["meta.stats_sd"]))


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg, out = _resolve(args, "synth")
    data = cfg.data
    overrides = {k: v for k, v in (("n", args.n), ("seed", args.seed)) if v is not None}
    if overrides:
        data = SynthConfig(**{**C._to_plain(data), **overrides, "splits": data.splits, "speckle": data.speckle})
        cfg = C.dataclasses.replace(cfg, data=data)
    harness.prepare_run_dir(out, cfg)
    rows = generate_dataset(data, out / "data")
    print(f"wrote {len(rows)} clips to {out / 'data'}")
    return 0


def cmd_perturb(args) -> int:
    cfg, out = _resolve(args, "perturb")
    out = args.output if args.output is not None else out
    if (args.preset is None) == (args.spec is None):
        raise CliError("exactly one of --preset or --spec is required")
    if args.preset is not None:
        specs = [perturb.get_preset(args.preset)]
    else:
        import yaml

        raw = yaml.safe_load(args.spec.read_text())
        items = raw if isinstance(raw, list) else [raw]
        specs = [perturb.PerturbSpec(d["kind"], d.get("params", {}), d.get("p", 1.0), d.get("seed", 0)) for d in items]
    src = args.input
    files = sorted(src.glob("*.ecv"))
    if not files:
        raise CliError(f"no .ecv clips in {src}")
    out.mkdir(parents=True, exist_ok=True)
    base = args.seed if args.seed is not None else cfg.perturb.seed
    for f in files:
        video = container.read_clip(f)
        mask = harness.scan_mask(video, args.mask)
        res = perturb.compose(specs, video, mask, seed=perturb.seed_from_name(f.name) ^ base)
        container.write(out / f.name, res.astype(np.float32))
    if (src / "labels.csv").exists():
        (out / "labels.csv").write_bytes((src / "labels.csv").read_bytes())
    print(f"perturbed {len(files)} clips into {out}")
    return 0


def cmd_pretrain_jepa(args) -> int:
    cfg, out = _resolve(args, "pretrain-jepa")
    _, videos = _load_videos(args.data, "train")
    harness.prepare_run_dir(out, cfg)
    state, curve = jepa.train(videos, cfg.jepa)
    harness.save_checkpoint(out / "jepa.ecv", state)
    write_curve(out / "curve_jepa.csv", curve)
    print(f"{cfg.jepa.total_updates} updates; checkpoint {out / 'jepa.ecv'}")
    return 0


def cmd_pretrain_mae(args) -> int:
    cfg, out = _resolve(args, "pretrain-mae")
    _, videos = _load_videos(args.data, "train")
    harness.prepare_run_dir(out, cfg)
    budget = mae.paired_budget(cfg.jepa, len(videos))
    print(budget.summary())
    state, curve = mae.train(videos, cfg.mae, budget, cfg.jepa)
    harness.save_checkpoint(out / "mae.ecv", state)
    write_curve(out / "curve_mae.csv", curve)
    return 0


def cmd_budget(args) -> int:
    b = mae.compute_budget(args.dataset, args.per_gpu, args.gpus, args.accum, args.target)
    print(b.summary())
    return 0


def cmd_probe(args) -> int:
    cfg, out = _resolve(args, "probe")
    rows, videos = _load_videos(args.data)
    enc = _load_encoder(args.checkpoint, cfg)
    harness.prepare_run_dir(out, cfg)
    feats = harness.extract_features(enc, videos, cfg.probe.features)
    task = TASKS[args.task]
    seed = cfg.probe.protocol.seed
    if args.task == "rv":
        train, val = harness.study_task_data(feats, rows, "train"), harness.study_task_data(feats, rows, "val")
    else:
        tr = harness.split_indices(rows, "train")
        tr = tr[harness.label_fraction_subset(len(tr), args.label_fraction, seed)]
        train = harness.clip_task_data(feats, rows, tr, args.task)
        val = harness.clip_task_data(feats, rows, harness.split_indices(rows, "val"), args.task)
    grid = train_probe(train, val, task, cfg.probe.protocol, seed)
    write_grid_report(out / "grid.csv", grid.rows)
    _save_probe(out / "probe.ecv", grid.best)
    (out / "protocol.txt").write_text(cfg.probe.protocol.serialize())
    print(f"best cell lr={grid.best_cell[0]:g} wd={grid.best_cell[1]:g}; probe {out / 'probe.ecv'}")
    return 0


def cmd_eval(args) -> int:
    cfg, out = _resolve(args, "eval")
    probe_path = args.probe if args.probe is not None else out / "probe.ecv"
    if not probe_path.exists():
        raise CliError(f"missing probe checkpoint: {probe_path} (run `probe` first)")
    rows, videos = _load_videos(args.data)
    enc = _load_encoder(args.checkpoint, cfg)
    probe = _load_probe(probe_path, TASKS["ef"], cfg)
    harness.prepare_run_dir(out, cfg)
    te = harness.split_indices(rows, "test")
    test_rows = [rows[i] for i in te]
    copies = harness.perturbed_copies(videos[te], [r.id for r in test_rows], cfg.perturb.grid, cfg.perturb.mask, cfg.perturb.seed)
    metrics = harness.robustness_sweep(
        probe, enc, videos[te], test_rows, copies, cfg.probe.features, "eval", args.model, cfg.probe.protocol.seed
    )
    harness.write_metrics(out / "metrics.csv", metrics)
    for r in metrics:
        print(f"{r.perturbation:>14s} {r.severity:>6s} {r.metric} {r.value:.5f}")
    return 0


def cmd_ablate(args) -> int:
    cfg, out = _resolve(args, "ablate")
    rows, videos = _load_videos(args.data)
    enc = _load_encoder(args.checkpoint, cfg)
    harness.prepare_run_dir(out, cfg)
    feats = harness.extract_features(enc, videos, cfg.probe.features)
    metrics = harness.run_ablations(feats, rows, cfg.probe.protocol, cfg.probe.protocol.seed, cfg.sweep.rv_missing_rate, args.model)
    harness.write_metrics(out / "metrics.csv", metrics)
    for r in metrics:
        print(f"{r.perturbation:>22s} {r.metric:>16s} {r.value:.5f}")
    return 0


def cmd_run(args) -> int:
    cfg, out = _resolve(args, "run")
    seeds = [args.seed] if args.seed is not None else None
    rows = harness.run_experiment(cfg, out, seeds=seeds, ablations=not args.no_ablations, dataset_dir=args.data)
    harness.plot_degradation(rows, out / "degradation.png")
    print(f"{len(rows)} metric rows in {out / 'metrics.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskjepa", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic clip dataset")
    _common(p)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("perturb", help="apply a perturbation preset or spec to a directory of clips")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--spec", type=Path, default=None)
    p.add_argument("--mask", choices=("auto", "sector", "full"), default="sector")
    p.set_defaults(func=cmd_perturb)

    for name, func in (("pretrain-jepa", cmd_pretrain_jepa), ("pretrain-mae", cmd_pretrain_mae)):
        p = sub.add_parser(name, help="pretrain on the train split of a dataset")
        _common(p)
        p.add_argument("--data", type=Path, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("budget", help="compute-matched update arithmetic")
    _common(p)
    p.add_argument("--dataset", type=int, required=True)
    p.add_argument("--per-gpu", type=int, required=True)
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--accum", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("probe", help="train the attentive probe grid on a frozen checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", choices=sorted(TASKS), default="ef")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="robustness sweep of a trained EF probe")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--probe", type=Path, default=None)
    p.add_argument("--model", default="model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="fusion / view-dropout / stream-embedding ablations")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--model", default="model")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", help="full paired experiment over the configured seeds")
    _common(p)
    p.add_argument("--data", type=Path, default=None, help="reuse an existing dataset directory")
    p.add_argument("--no-ablations", action="store_true")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"error: invalid config key {exc.key}: {exc}", file=sys.stderr)
        return 2
    except (CliError, mae.BudgetMismatch, container.ContainerError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
