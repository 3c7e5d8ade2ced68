import numpy as np
import pytest
from toys import TINY_EXPERIMENT

from deskjepa import config as C
from deskjepa import harness as H
from deskjepa.perturb import MAIN_GRID
from deskjepa.probe import ProbeData, ProbeParams, ProbeProtocol, StreamLayout, TaskSpec, TrainedProbe
from deskjepa.synth import SynthConfig, default_geometry, geometric_sector_mask, plan_dataset


def linear_probe(D=4, seed=0):
    params = ProbeParams(StreamLayout(1, 1, 2, D), ProbeProtocol(depth=1, heads=2), 1, np.random.default_rng(seed))
    return TrainedProbe(params, TaskSpec("regression"), mu=0.5, sd=0.1)


def clip_data(seed, n=10, D=4):
    rng = np.random.default_rng(seed)
    return ProbeData(rng.normal(size=(n, 1, 1, 2, D)).astype(np.float32), np.ones((n, 1), bool), rng.uniform(0.1, 0.8, n))


def test_identity_perturbation_has_zero_degradation():
    probe, clean = linear_probe(), clip_data(0)
    rows = H.robustness_rows(probe, clean, {"depth-0.3": clean}, "t", "m", "ef", 0)
    assert rows[-1].metric == "avg_degradation" and rows[-1].value == 0.0


def test_main_grid_yields_six_perturbed_rows_and_one_clean():
    probe, clean = linear_probe(), clip_data(0)
    pert = {name: clip_data(i + 1) for i, name in enumerate(MAIN_GRID)}
    rows = H.robustness_rows(probe, clean, pert, "t", "m", "ef", 0)
    cells = [r for r in rows if r.metric == "mae"]
    assert sum(r.perturbation == "none" for r in cells) == 1
    assert len([r for r in cells if r.perturbation != "none"]) == 6
    assert {(r.perturbation, r.severity) for r in cells[1:]} == {
        ("depth_linear", "0.3"), ("depth_linear", "0.5"), ("depth_linear", "0.7"),
        ("shadow_band", "0.1"), ("shadow_band", "0.2"), ("shadow_band", "0.3"),
    }


def test_avg_degradation_recomputes_from_csv(tmp_path):
    probe, clean = linear_probe(), clip_data(0)
    pert = {name: clip_data(i + 1) for i, name in enumerate(MAIN_GRID)}
    rows = H.robustness_rows(probe, clean, pert, "t", "m", "ef", 3)
    H.write_metrics(tmp_path / "m.csv", rows)
    back = H.read_metrics(tmp_path / "m.csv")
    assert back == rows
    assert H.avg_degradation(back, "m", "ef", 3) == rows[-1].value


def test_relative_degradation_direction():
    assert H.relative_degradation(2.0, 3.0, "mae") == pytest.approx(0.5)
    assert H.relative_degradation(0.8, 0.6, "accuracy") == pytest.approx(0.25)
    with pytest.raises(ValueError):
        H.relative_degradation(0.0, 1.0, "mae")


def test_metrics_append_keeps_one_header(tmp_path):
    r = H.MetricsRow("e", "m", "t", "none", "0", 1.0, 0, "mae", 0.1)
    H.write_metrics(tmp_path / "m.csv", [r])
    H.write_metrics(tmp_path / "m.csv", [r], append=True)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(H.METRICS_HEADER) and len(lines) == 3


def test_perturbed_copies_are_deterministic_and_respect_the_sector():
    rng = np.random.default_rng(0)
    vids = rng.uniform(0, 1, size=(3, 8, 32, 32)).astype(np.float32)
    a = H.perturbed_copies(vids, ["x", "y", "z"], ["shadow-0.2", "depth-0.5"])
    b = H.perturbed_copies(vids, ["x", "y", "z"], ["shadow-0.2", "depth-0.5"])
    sector = geometric_sector_mask(default_geometry(32, 32), 32, 32)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        assert np.array_equal(a[k][..., ~sector], vids[..., ~sector])
    # each clip draws its own band centre from its id
    ratio = a["shadow-0.2"] / np.maximum(vids, 1e-6)
    assert not np.allclose(ratio[0, 0], ratio[1, 0])


def test_scan_mask_modes():
    v = np.zeros((2, 8, 8))
    assert H.scan_mask(v, "full") is None
    assert H.scan_mask(v, "auto").sum() == 0
    assert H.scan_mask(v, "sector").shape == (8, 8)
    with pytest.raises(ValueError, match="mask mode"):
        H.scan_mask(v, "nope")


def test_pool_tokens():
    tok = np.arange(2 * 32 * 3, dtype=np.float64).reshape(2, 32, 3)
    out = H.pool_tokens(tok, (2, 4, 4), (1, 2, 2))
    assert out.shape == (2, 8, 3)
    grid = tok.reshape(2, 2, 4, 4, 3)
    np.testing.assert_allclose(out[0, 0], grid[0, 0, :2, :2].mean(axis=(0, 1)))
    with pytest.raises(ValueError):
        H.pool_tokens(tok, (2, 4, 4), (1, 3, 1))


def test_study_task_data_pairs_views_of_one_study():
    rows = plan_dataset(SynthConfig(n=60, seed=2))
    feats = np.random.default_rng(0).normal(size=(60, 2, 4)).astype(np.float32)
    data = H.study_task_data(feats, rows, "train")
    assert data.features.shape[1:] == (2, 1, 2, 4)
    by_study = {}
    for i, r in enumerate(rows):
        if r.split == "train" and r.view_class in (0, 2):
            by_study.setdefault(r.study, {})[r.view_class] = i
    for k, sid in enumerate(data.ids):
        entry = by_study[int(sid[1:])]
        for vi, v in enumerate((0, 2)):
            assert data.avail[k, vi] == (v in entry)
            if v in entry:
                np.testing.assert_array_equal(data.features[k, vi, 0], feats[entry[v]])
                assert data.targets[k] == rows[entry[v]].rv


def test_drop_views_keeps_one_view():
    d = ProbeData(np.zeros((200, 2, 1, 1, 1)), np.ones((200, 2), bool), np.zeros(200))
    out = H.drop_views(d, 0.5, 0)
    assert np.all(out.avail.sum(axis=1) >= 1)
    assert 0.4 < np.mean(out.avail.sum(axis=1) == 1) < 0.6


def test_tiny_experiment_end_to_end(tmp_path):
    cfg = C.from_dict(TINY_EXPERIMENT)
    rows = H.run_experiment(cfg, tmp_path / "run", seeds=[0])
    assert C.load(tmp_path / "run" / "config.yaml") == cfg
    back = H.read_metrics(tmp_path / "run" / "metrics.csv")
    assert back == rows
    for model in ("jepa", "mae"):
        deg = [r for r in rows if r.model == model and r.metric == "avg_degradation"]
        assert len(deg) == 1 and deg[0].value == pytest.approx(H.avg_degradation(rows, model, "ef", 0))
        fracs = sorted(r.label_fraction for r in rows if r.model == model and r.task == "view")
        assert fracs == [0.1, 1.0]
    variants = {r.perturbation for r in rows if r.experiment == "ablation"}
    assert variants == {"early", "early_no_dropout", "early_no_stream_embed", "late"}
    seed_dir = tmp_path / "run" / "seed0"
    for name in ("curve_jepa.csv", "curve_mae.csv", "jepa.ecv", "mae.ecv", "metrics.csv", "grid_jepa_ef.csv"):
        assert (seed_dir / name).exists()
    # the per-seed CSV carries the same rows as the merged one
    assert (seed_dir / "metrics.csv").read_bytes() == (tmp_path / "run" / "metrics.csv").read_bytes()
    H.plot_degradation(rows, tmp_path / "deg.png")
    H.plot_curves({"jepa": seed_dir / "curve_jepa.csv"}, tmp_path / "curve.png")
    assert (tmp_path / "deg.png").stat().st_size > 0
