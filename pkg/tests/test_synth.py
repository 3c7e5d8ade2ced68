import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskjepa import container
from deskjepa.synth import (
    SectorGeometry,
    SynthConfig,
    dark_area,
    default_geometry,
    generate_clip,
    generate_dataset,
    geometric_sector_mask,
    labels_csv,
    plan_dataset,
    read_labels,
    sample_study,
    split_counts,
)


def test_apex_pixel_is_inside():
    g = SectorGeometry(apex=(10.0, 0.0), half_angle=math.pi / 4, max_radius=20.0)
    assert geometric_sector_mask(g, 32, 21)[0, 10]


def test_pixel_just_past_the_radius_is_outside():
    g = SectorGeometry(apex=(10.0, 0.0), half_angle=math.pi / 4, max_radius=20.0)
    m = geometric_sector_mask(g, 32, 21)
    assert m[20, 10] and not m[21, 10]


def test_sector_area_matches_continuous_formula():
    # sector of half-angle theta spans 2*theta, so its area is theta * r^2
    H, W = 110, 201
    g = SectorGeometry(apex=((W - 1) / 2, 0.0), half_angle=math.pi / 4, max_radius=100.0)
    area = geometric_sector_mask(g, H, W).sum()
    expected = math.pi / 4 * 100.0**2
    assert abs(area - expected) / expected < 0.02


@pytest.mark.parametrize("theta", [0.0, -0.3])
def test_non_positive_half_angle_rejected(theta):
    g = SectorGeometry(apex=(5.0, 0.0), half_angle=theta, max_radius=10.0)
    with pytest.raises(ValueError, match="half-angle"):
        geometric_sector_mask(g, 16, 16)


@pytest.mark.parametrize("ef", [0.1, 0.35, 0.6, 0.8])
@pytest.mark.parametrize("view", [0, 1, 2])
def test_noiseless_clip_recovers_ef_from_dark_area(ef, view):
    H = W = 128
    clip = generate_clip(7, None, view, ef, 0.0, T=8, H=H, W=W)
    area = dark_area(clip.video, geometric_sector_mask(default_geometry(H, W), H, W))
    est = 1.0 - area.min() / area.max()
    assert abs(est - ef) < 0.02


def test_same_seed_gives_identical_bytes():
    a = generate_clip(123, None, 1, 0.4, 0.6)
    b = generate_clip(123, None, 1, 0.4, 0.6)
    assert a.video.tobytes() == b.video.tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(0, 2), st.floats(0.1, 0.8), st.floats(0.0, 1.0))
@settings(max_examples=25, deadline=None)
def test_pixels_outside_sector_are_zero_and_values_in_unit_range(seed, view, ef, speckle):
    clip = generate_clip(seed, None, view, ef, speckle)
    mask = geometric_sector_mask(default_geometry(32, 32), 32, 32)
    assert np.all(clip.video[:, ~mask] == 0)
    assert clip.video.min() >= 0 and clip.video.max() <= 1


def test_views_are_separated_by_mean_frame_distance():
    rng = np.random.default_rng(0)
    means = {v: [] for v in range(3)}
    for v in range(3):
        for _ in range(10):
            clip = generate_clip(int(rng.integers(2**32)), None, v, float(rng.uniform(0.1, 0.8)), 0.6)
            means[v].append(clip.video.mean(axis=0))
    within, between = [], []
    for v in range(3):
        for u in range(3):
            for i, a in enumerate(means[v]):
                for j, b in enumerate(means[u]):
                    if (u, j) <= (v, i):
                        continue
                    (within if u == v else between).append(np.abs(a - b).mean())
    assert np.mean(between) > np.mean(within)


def test_split_arithmetic():
    assert split_counts(100, (0.7, 0.1, 0.2)) == (70, 10, 20)
    rows = plan_dataset(SynthConfig(n=100))
    counts = {s: sum(r.split == s for r in rows) for s in ("train", "val", "test")}
    assert counts == {"train": 70, "val": 10, "test": 20}
    assert len({r.id for r in rows}) == 100


def test_dataset_of_ten(tmp_path):
    rows = generate_dataset(SynthConfig(n=10, seed=3), tmp_path)
    files = sorted(tmp_path.glob("*.ecv"))
    assert len(files) == 10 and len(rows) == 10
    back = read_labels(tmp_path / "labels.csv")
    assert [r.id for r in back] == [r.id for r in rows]
    clip = container.read_clip(files[0])
    assert clip.shape == (8, 32, 32)


def test_labels_table_is_deterministic(tmp_path):
    generate_dataset(SynthConfig(n=6, seed=9), tmp_path / "a")
    generate_dataset(SynthConfig(n=6, seed=9), tmp_path / "b")
    assert (tmp_path / "a" / "labels.csv").read_bytes() == (tmp_path / "b" / "labels.csv").read_bytes()
    for f in (tmp_path / "a").glob("*.ecv"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_label_header():
    assert labels_csv([]).strip() == "id,view_class,ef,rv,split"


def test_unwritable_output_fails(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(SynthConfig(n=1), blocker / "sub")


def _residual_fraction(X: np.ndarray, y: np.ndarray) -> float:
    X1 = np.column_stack([X, np.ones(len(X))])
    coef, *_ = np.linalg.lstsq(X1, y, rcond=None)
    return float(np.var(y - X1 @ coef) / np.var(y))


def test_two_view_target_needs_both_views():
    rng = np.random.default_rng(1)
    ps = [sample_study(rng) for _ in range(2000)]
    rv = np.array([p.rv for p in ps])
    shared = [[p.ef, p.size, p.tissue, p.myocardium, *p.jitter] for p in ps]
    view0 = np.array([s + [p.a] for s, p in zip(shared, ps)])
    view2 = np.array([s + [p.b] for s, p in zip(shared, ps)])
    assert _residual_fraction(view0, rv) > 0.25
    assert _residual_fraction(view2, rv) > 0.25
    both = np.array([s + [p.a, p.b] for s, p in zip(shared, ps)])
    assert _residual_fraction(both, rv) < 1e-6
