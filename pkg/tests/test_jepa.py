import csv

import numpy as np
import pytest
import reference as ref
from toys import TOY_ENCODER, toy_clips, toy_jepa

from deskjepa import jepa
from deskjepa import tensor as T
from deskjepa.jepa import JepaState, ema_update, jepa_loss, target_embeddings
from deskjepa.masking import sample_multiblock_mask
from deskjepa.optim import AdamW
from deskjepa.tensor import Tensor
from deskjepa.training import LrSchedule, NonFiniteLoss, collapse_metrics, write_curve

GRID = (2, 4, 4)


def sub(sd, prefix):
    return {k[len(prefix):]: v for k, v in sd.items() if k.startswith(prefix)}


def masks(seed=0, cfg=None):
    cfg = cfg or toy_jepa()
    return sample_multiblock_mask(GRID, cfg.masking, np.random.default_rng(seed))


def perturb_target(state, rng):
    for _, p in state.target.named_parameters(include_frozen=True):
        p.data = p.data + rng.normal(0, 0.05, size=p.shape).astype(p.data.dtype)


def test_loss_is_zero_when_predictions_equal_targets(monkeypatch):
    state = JepaState(toy_jepa())
    v = toy_clips(2)
    ctx, tgt = masks()
    monkeypatch.setattr(jepa, "predict_targets", lambda s, vids, c, t: Tensor(target_embeddings(s, vids, t)))
    assert jepa_loss(state, v, (ctx, tgt)).item() == 0.0


def test_loss_matches_reference_with_constant_targets():
    with T.precision(np.float64):
        cfg = toy_jepa()
        state = JepaState(cfg)
        perturb_target(state, np.random.default_rng(1))
        v = toy_clips(3).astype(np.float64)
        ctx, tgt = masks(3)
        loss = jepa_loss(state, v, (ctx, tgt)).item()
    sd = state.state_dict()
    full, _ = ref.encoder(v, sub(sd, "target."), cfg.encoder)
    targets = full[:, tgt].copy()
    context, grid = ref.encoder(v, sub(sd, "context."), cfg.encoder, ctx)
    pred = ref.predictor(context, sub(sd, "predictor."), grid, ctx, tgt, cfg.pred_heads)
    assert abs(loss - np.abs(pred - targets).mean()) < 1e-6


def test_loss_invariant_to_target_order():
    with T.precision(np.float64):
        state = JepaState(toy_jepa())
        v = toy_clips(2).astype(np.float64)
        ctx, tgt = masks(4)
        a = jepa_loss(state, v, (ctx, tgt)).item()
        b = jepa_loss(state, v, (ctx, np.random.default_rng(0).permutation(tgt))).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_gradients_reach_context_predictor_and_mask_token_only():
    state = JepaState(toy_jepa())
    T.backward(jepa_loss(state, toy_clips(2), masks()))
    for p in state.trainable():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), p.name
    assert np.abs(state.predictor.mask_token.grad).sum() > 0
    for _, p in state.target.named_parameters(include_frozen=True):
        assert p.grad is None and not p.requires_grad


def test_sampled_coordinates_match_finite_differences():
    with T.precision(np.float64):
        state = JepaState(toy_jepa())
        perturb_target(state, np.random.default_rng(2))
        v = toy_clips(2).astype(np.float64)
        mk = masks(5)
        T.backward(jepa_loss(state, v, mk))
        rng = np.random.default_rng(3)
        for p in state.trainable():
            for _ in range(2):
                i = tuple(int(rng.integers(s)) for s in p.shape)
                old = p.data[i]
                p.data[i] = old + 1e-5
                up = jepa_loss(state, v, mk).item()
                p.data[i] = old - 1e-5
                down = jepa_loss(state, v, mk).item()
                p.data[i] = old
                num = (up - down) / 2e-5
                assert abs(num - p.grad[i]) / max(1e-6, abs(num) + abs(p.grad[i])) < 1e-4, p.name


def test_empty_sets_rejected():
    state = JepaState(toy_jepa())
    with pytest.raises(ValueError, match="empty target"):
        jepa_loss(state, toy_clips(1), (np.arange(32), np.array([], dtype=int)))
    with pytest.raises(ValueError, match="empty context"):
        jepa_loss(state, toy_clips(1), (np.array([], dtype=int), np.arange(32)))


# -- EMA ----------------------------------------------------------------------------

def test_ema_one_step_arithmetic():
    with T.precision(np.float64):
        state = JepaState(toy_jepa(ema_momentum=0.9))
        for _, p in state.target.named_parameters(include_frozen=True):
            p.data = np.zeros_like(p.data)
        for _, p in state.context.named_parameters():
            p.data = np.ones_like(p.data)
        ema_update(state)
    for _, p in state.target.named_parameters(include_frozen=True):
        np.testing.assert_allclose(p.data, 0.1, rtol=1e-15)


def test_ema_momentum_one_is_identity():
    state = JepaState(toy_jepa(ema_momentum=1.0))
    before = state.target.state_dict()
    for _, p in state.context.named_parameters():
        p.data = p.data + 1.0
    ema_update(state)
    for k, v in state.target.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_ema_shape_mismatch_fails():
    state = JepaState(toy_jepa())
    state.target.norm.weight.data = np.ones(3, dtype=np.float32)
    with pytest.raises(ValueError, match="shape mismatch"):
        ema_update(state)


def test_ema_follows_closed_form_after_optimizer_steps():
    with T.precision(np.float64):
        cfg = toy_jepa(ema_momentum=0.99925)
        state = JepaState(cfg)
        opt = AdamW(state.trainable())
        v = toy_clips(4).astype(np.float64)
        for s in range(3):
            prev = state.target.state_dict()
            opt.zero_grad()
            T.backward(jepa_loss(state, v, masks(s)))
            opt.step(1e-3, 0.04)
            ema_update(state)
            ctx = state.context.state_dict()
            m = cfg.ema_momentum
            for k, t in state.target.state_dict().items():
                assert np.max(np.abs(t - (m * prev[k] + (1 - m) * ctx[k]))) < 1e-12


# -- schedule -------------------------------------------------------------------------

def test_schedule_shape():
    s = LrSchedule(total=100, warmup=10, cooldown=20, lr=1e-3, final_lr=1e-6)
    assert s(0) == 0.0
    assert abs(s(5) - 5e-4) < 1e-9
    assert s(10) == s(79) == 1e-3
    assert s(99) < s(80) and s(100) == pytest.approx(1e-6)
    lrs = [s(i) for i in range(100)]
    assert all(b <= a for a, b in zip(lrs[80:], lrs[81:]))


def test_schedule_rejects_overlong_phases():
    with pytest.raises(ValueError, match="exceed"):
        LrSchedule(total=10, warmup=6, cooldown=5, lr=1.0, final_lr=0.0)


def test_config_schedule_uses_epoch_units():
    s = toy_jepa(epochs=10, ipe=8, warmup=1.0, cooldown=2.0).schedule()
    assert (s.total, s.warmup, s.cooldown) == (80, 8, 16)


# -- training ---------------------------------------------------------------------------

def test_training_loss_trends_down_and_targets_stay_gradient_free():
    cfg = toy_jepa(epochs=10, ipe=5, log_every=1, ema_momentum=0.99)
    state, curve = jepa.train(toy_clips(20), cfg)
    losses = [r["loss"] for r in curve]
    assert len(losses) == 50 and all(np.isfinite(losses))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    for _, p in state.target.named_parameters(include_frozen=True):
        assert p.grad is None
    assert state.step == 50


def test_curve_rows_and_file(tmp_path):
    cfg = toy_jepa(epochs=4, ipe=5, log_every=5)
    _, curve = jepa.train(toy_clips(8), cfg)
    assert len(curve) == cfg.total_updates // cfg.log_every
    write_curve(tmp_path / "c.csv", curve)
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["update", "loss", "lr", "min_std"]
    assert len(rows) - 1 == 4


def test_training_is_deterministic():
    cfg = toy_jepa(epochs=4, ipe=3, log_every=1)
    _, a = jepa.train(toy_clips(8), cfg)
    _, b = jepa.train(toy_clips(8), cfg)
    assert a == b


def test_non_finite_loss_aborts_with_context(monkeypatch):
    monkeypatch.setattr(jepa, "jepa_loss", lambda *a, **k: (Tensor(np.array(np.nan)), np.zeros((4, 32, 16))))
    with pytest.raises(NonFiniteLoss, match="update 0"):
        jepa.train(toy_clips(8), toy_jepa())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        jepa.train(np.zeros((0, 4, 16, 16)), toy_jepa())


def test_state_dict_roundtrip():
    a = JepaState(toy_jepa(seed=1))
    b = JepaState(toy_jepa(seed=2))
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[k], v)


# -- collapse metrics ---------------------------------------------------------------------

def test_identical_embeddings_have_zero_spread():
    assert collapse_metrics(np.ones((10, 4)))["min_std"] == 0.0


def test_gaussian_embeddings_have_unit_spread():
    stats = collapse_metrics(np.random.default_rng(0).normal(size=(1000, 32)))
    assert 0.95 <= stats["mean_std"] <= 1.05


def test_collapse_metrics_need_two_items():
    with pytest.raises(ValueError):
        collapse_metrics(np.ones((1, 4)))


def test_toy_training_does_not_collapse():
    cfg = toy_jepa(epochs=10, ipe=5, ema_momentum=0.99)
    state, _ = jepa.train(toy_clips(20), cfg)
    with T.no_grad():
        emb = state.target(toy_clips(16, seed=9)).data.mean(axis=1)
    assert collapse_metrics(emb)["min_std"] > 1e-3


def test_encoder_default_is_shared_with_toys():
    assert toy_jepa().encoder is TOY_ENCODER
