import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskjepa import nn
from deskjepa import tensor as T
from deskjepa.probe import (
    CrossAttention,
    ProbeData,
    ProbeParams,
    ProbeProtocol,
    StreamLayout,
    Study,
    TaskSpec,
    TrainedProbe,
    add_stream_embeddings,
    assemble_streams,
    build_probe_data,
    clip_offsets,
    feature_stats,
    fit_probe,
    label_fraction_subset,
    late_fusion_predict,
    probe_forward,
    train_probe,
    view_dropout,
    write_grid_report,
)
from deskjepa.tensor import Tensor
from deskjepa.vit import TubeletConfig, VideoEncoder

SMALL = ProbeProtocol(depth=2, heads=2, mlp_ratio=2.0, batch_size=8, epochs=2, min_steps=5)


def params_for(layout, protocol=SMALL, n_out=1, seed=0):
    return ProbeParams(layout, protocol, n_out, np.random.default_rng(seed))


def random_data(S=12, V=2, C=1, N=3, D=8, seed=0, regression=True):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(S, V, C, N, D)).astype(np.float32)
    avail = np.ones((S, V), dtype=bool)
    avail[::3, 0] = False
    targets = rng.normal(size=S) if regression else rng.integers(0, 3, size=S)
    return ProbeData(feats, avail, targets, [f"s{i}" for i in range(S)])


# -- stream assembly ---------------------------------------------------------------

def const_encoder(N, D):
    return lambda clip: np.full((N, D), float(clip[0].mean()), dtype=np.float32)


def test_two_views_three_clips_give_1536_rows():
    layout = StreamLayout(V=2, C=3, N_E=256, D=4)
    study = Study("a", (0, 2), {0: np.ones((8, 4, 4)), 2: np.zeros((8, 4, 4))})
    X, m = assemble_streams(study, layout, const_encoder(256, 4), np.random.default_rng(0))
    assert X.shape == (1536, 4) and layout.total_tokens == 1536
    assert m.tolist() == [True, True]


def test_single_clip_rows():
    layout = StreamLayout(V=3, C=1, N_E=16, D=4)
    study = Study("a", (0, 1, 2), {1: np.ones((8, 4, 4))})
    X, m = assemble_streams(study, layout, const_encoder(16, 4))
    assert X.shape == (48, 4)
    assert m.tolist() == [False, True, False]
    assert np.all(X[:16] == 0) and np.all(X[32:] == 0) and np.all(X[16:32] == 1)


def test_layout_is_view_major_clip_minor():
    layout = StreamLayout(V=2, C=3, N_E=2, D=1)
    view, clip = layout.stream_ids()
    assert view.tolist() == [0] * 6 + [1] * 6
    assert clip.tolist() == [0, 0, 1, 1, 2, 2] * 2


def test_all_views_missing_fails():
    with pytest.raises(ValueError, match="no available views"):
        assemble_streams(Study("x", (0, 1), {}), StreamLayout(2, 1, 4, 4), const_encoder(4, 4))


def test_clip_offsets_are_distinct():
    off = clip_offsets(8, 3, np.random.default_rng(0))
    assert len(set(off.tolist())) == 3 and off.min() >= 0 and off.max() < 8
    assert clip_offsets(8, 1, np.random.default_rng(0)).tolist() == [0]
    with pytest.raises(ValueError):
        clip_offsets(2, 3, np.random.default_rng(0))


def test_frozen_backbone_untouched_by_probe_training():
    enc = VideoEncoder(TubeletConfig(patch=4, tubelet=2, embed_dim=8, depth=1, heads=2), np.random.default_rng(0))
    before = {k: v.copy() for k, v in enc.state_dict().items()}

    def encode(clip):
        with T.no_grad():
            return enc(clip).data[0]

    rng = np.random.default_rng(1)
    studies = [Study(f"s{i}", (0,), {0: rng.uniform(0, 1, (4, 8, 8))}, float(rng.normal())) for i in range(8)]
    data = build_probe_data(studies, StreamLayout(1, 1, 8, 8), encode)
    fit_probe(data, TaskSpec("regression"), SMALL, 1e-3, 0.01, 0)
    for name, p in enc.named_parameters(include_frozen=True):
        assert p.grad is None or np.all(p.grad == 0)
        np.testing.assert_array_equal(p.data, before[name])


# -- stream embeddings ----------------------------------------------------------------

def test_zero_embeddings_leave_tokens_unchanged():
    layout = StreamLayout(2, 2, 3, 4)
    p = params_for(layout)
    p.view_embed.data[:] = 0
    p.clip_embed.data[:] = 0
    X = np.random.default_rng(0).normal(size=(1, 12, 4)).astype(np.float32)
    np.testing.assert_array_equal(add_stream_embeddings(X, layout, p).data, X)


def test_stream_offset_is_view_plus_clip():
    layout = StreamLayout(V=2, C=3, N_E=4, D=5)
    p = params_for(layout, ProbeProtocol(depth=2, heads=5, batch_size=4))
    X = np.random.default_rng(1).normal(size=(1, layout.total_tokens, 5)).astype(np.float32)
    off = add_stream_embeddings(X, layout, p).data[0] - X[0]
    for v in range(2):
        for c in range(3):
            block = off[(v * 3 + c) * 4:(v * 3 + c + 1) * 4]
            expected = p.view_embed.data[v] + p.clip_embed.data[c]
            np.testing.assert_allclose(block, np.broadcast_to(expected, block.shape), atol=1e-6)
    # on a zero input the offset is exact, so it must be constant within each stream block
    zero = add_stream_embeddings(np.zeros_like(X), layout, p).data[0].reshape(6, 4, 5)
    assert np.all(zero == zero[:, :1])


def test_factorized_parameter_count():
    layout = StreamLayout(V=4, C=2, N_E=1, D=96)
    p = params_for(layout, ProbeProtocol(depth=1, heads=16))
    assert p.stream_param_count() == 576
    assert layout.L * layout.D == 768


def test_stream_embeddings_off_are_zero_and_frozen():
    p = params_for(StreamLayout(2, 1, 2, 4), ProbeProtocol(depth=2, heads=2, stream_embeddings=False))
    assert np.all(p.view_embed.data == 0) and not p.view_embed.requires_grad
    assert all(not n.startswith(("view_embed", "clip_embed")) for n, _ in p.named_parameters())


# -- view dropout --------------------------------------------------------------------

def test_dropout_zero_probability_keeps_mask():
    m = np.array([True, False, True, True])
    np.testing.assert_array_equal(view_dropout(m, 0.0, np.random.default_rng(0)), m)


@given(st.lists(st.booleans(), min_size=1, max_size=6).filter(any), st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_dropout_certain_leaves_exactly_one_available_view(bits, seed):
    m = np.array(bits)
    out = view_dropout(m, 1.0, np.random.default_rng(seed))
    assert out.sum() == 1 and np.all(out <= m)


def test_dropout_rate_per_view():
    rng = np.random.default_rng(0)
    m = np.ones((10_000, 4), dtype=bool)
    out = view_dropout(m, 0.1, rng)
    rates = 1 - out.mean(axis=0)
    assert np.all((rates >= 0.08) & (rates <= 0.12))


# -- forward ----------------------------------------------------------------------------

@given(st.integers(0, 10**6), st.floats(-1e3, 1e3))
@settings(max_examples=25, deadline=None)
def test_masked_view_contents_cannot_change_the_output(seed, fill):
    layout = StreamLayout(V=3, C=2, N_E=3, D=8)
    p = params_for(layout)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, layout.total_tokens, 8)).astype(np.float32)
    avail = np.array([[True, False, True], [False, True, False]])
    Y = X.copy()
    block = layout.C * layout.N_E
    Y[0, block:2 * block] = rng.uniform(-1e3, 1e3, size=(block, 8))
    Y[1, :block] = fill
    Y[1, 2 * block:] = rng.normal(size=(block, 8)) * 1e4
    a = probe_forward(X, avail, p).data
    b = probe_forward(Y, avail, p).data
    assert a.tobytes() == b.tobytes()


def test_identical_tokens_pool_to_value_projection():
    D = 8
    xa = CrossAttention(D, 2, np.random.default_rng(0))
    tok = np.random.default_rng(1).normal(size=D).astype(np.float32)
    x = Tensor(np.broadcast_to(tok, (1, 5, D)).copy())
    q = Tensor(np.random.default_rng(2).normal(size=(1, 1, D)).astype(np.float32))
    out = xa(q, x).data[0, 0]
    kv = tok @ xa.kv.weight.data + xa.kv.bias.data
    expected = kv[D:] @ xa.proj.weight.data + xa.proj.bias.data
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


def test_attention_rows_sum_to_one_over_surviving_keys():
    layout = StreamLayout(V=2, C=1, N_E=4, D=8)
    p = params_for(layout)
    X = np.random.default_rng(3).normal(size=(3, 8, 8)).astype(np.float32)
    avail = np.array([[True, False], [True, True], [False, True]])
    probe_forward(X, avail, p)
    w = p.pooler.xattn.last_weights
    assert np.all(np.abs(w.sum(-1) - 1) < 1e-6)
    valid = np.repeat(avail, 4, axis=1)
    for b in range(3):
        assert np.all(w[b][..., ~valid[b]] == 0)


def test_forward_rejects_study_without_views():
    p = params_for(StreamLayout(2, 1, 2, 8))
    with pytest.raises(ValueError, match="at least one"):
        probe_forward(np.zeros((1, 4, 8), np.float32), np.array([[False, False]]), p)


def test_feature_stats_ignore_missing_views():
    d = random_data()
    d.features[~d.avail] = 1e6
    mu, sd = feature_stats(d)
    assert np.abs(mu).max() < 10 and sd.max() < 10


# -- grid training -------------------------------------------------------------------------

def test_grid_has_six_cells_and_best_is_minimum(tmp_path):
    train, val = random_data(seed=1), random_data(seed=2)
    res = train_probe(train, val, TaskSpec("regression"), SMALL, seed=0)
    assert len(res.rows) == 6
    assert sorted((r["lr"], r["wd"]) for r in res.rows) == sorted(SMALL.grid())
    best = [r for r in res.rows if r["best"]]
    assert len(best) == 1 and all(best[0]["metric"] <= r["metric"] for r in res.rows)
    write_grid_report(tmp_path / "grid.csv", res.rows)
    with open(tmp_path / "grid.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lr", "wd", "seed", "metric", "best"] and len(rows) == 7


def test_grid_values():
    assert ProbeProtocol().grid() == [(1e-4, 0.01), (1e-4, 0.1), (1e-4, 0.4), (5e-5, 0.01), (5e-5, 0.1), (5e-5, 0.4)]


def test_classification_grid_selects_highest_accuracy():
    train, val = random_data(seed=3, regression=False), random_data(seed=4, regression=False)
    res = train_probe(train, val, TaskSpec("classification", 3), SMALL, seed=0)
    best = [r for r in res.rows if r["best"]][0]
    assert all(best["metric"] >= r["metric"] for r in res.rows)


def test_probe_training_is_deterministic():
    d = random_data(seed=5)
    a = fit_probe(d, TaskSpec("regression"), SMALL, 1e-3, 0.1, 7).predict(d)
    b = fit_probe(d, TaskSpec("regression"), SMALL, 1e-3, 0.1, 7).predict(d)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("n", [1, 50, 99, 100, 1000, 1401])
def test_label_fraction_sizes(n):
    for frac in (0.01, 0.1, 1.0):
        idx = label_fraction_subset(n, frac, 0)
        assert len(idx) == max(1, int(np.floor(frac * n)))
        assert len(set(idx.tolist())) == len(idx) and idx.max() < n


def test_protocol_serialization_is_stable():
    assert ProbeProtocol().serialize() == ProbeProtocol().serialize()
    assert ProbeProtocol().serialize() != ProbeProtocol(p_miss=0.0).serialize()
    assert "heads=16" in ProbeProtocol().serialize()


# -- late fusion -------------------------------------------------------------------------

def constant_probe(layout, value):
    p = params_for(StreamLayout(1, layout.C, layout.N_E, layout.D))
    p.head.weight.data[:] = 0
    p.head.bias.data[:] = 0
    return TrainedProbe(p, TaskSpec("regression"), mu=value, sd=1.0)


def test_late_fusion_mask_aware_mean():
    d = random_data(S=3)
    d.avail[:] = [[True, True], [True, False], [False, True]]
    probes = [constant_probe(d.layout, 4.0), constant_probe(d.layout, 6.0)]
    np.testing.assert_allclose(late_fusion_predict(probes, d), [5.0, 4.0, 6.0])


def test_late_fusion_needs_one_probe_per_view():
    d = random_data(S=2)
    with pytest.raises(ValueError, match="one probe per view"):
        late_fusion_predict([constant_probe(d.layout, 1.0)], d)


def test_attention_bias_shape():
    b = nn.attention_bias(np.array([[True, False]]), np.float32)
    assert b.shape == (1, 1, 1, 2) and b[0, 0, 0, 1] == -np.inf


def test_feature_stats_pool_clips_and_tokens_per_view():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(30, 2, 2, 3, 4))
    avail = np.ones((30, 2), bool)
    avail[:10, 1] = False
    mu, sd = feature_stats(ProbeData(feats, avail, np.zeros(30)))
    assert mu.shape == sd.shape == (2, 1, 1, 4)
    np.testing.assert_allclose(mu[0, 0, 0], feats[:, 0].reshape(-1, 4).mean(axis=0), rtol=1e-5)
    np.testing.assert_allclose(sd[1, 0, 0], feats[10:, 1].reshape(-1, 4).std(axis=0), rtol=1e-5)
