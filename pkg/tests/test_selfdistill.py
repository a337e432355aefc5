"""Masking, distillation, EMA, schedules, and the training loop."""

import numpy as np
import pytest
from numpy.random import SeedSequence, default_rng

import meldlab.autodiff as ad
from meldlab.autodiff import AdamW, Tensor
from meldlab.classifier import class_weights
from meldlab.methods import ModelConfig, build_model
from meldlab.selfdistill import (
    EpochStats,
    MaskError,
    MaskMatrix,
    OnlineTargetPair,
    ScheduleSpec,
    TrainLoopConfig,
    TrainingError,
    apply_mask,
    distill_loss,
    ema_update,
    lambda_at,
    make_target,
    removal_mask,
    sample_mask,
    train_loop,
    train_step,
    stack_batch,
    validation_loss,
)
from meldlab.synthworld import generate_dataset

from fd_cases import tiny_world


# -- mask sampling ------------------------------------------------------------------


def test_sample_mask_obeys_exact_kept_count_law():
    groups = {"array": tuple(range(18))}
    ranges = {"array": (0.0, 2.0 / 18.0)}
    rng = default_rng(7)
    for _ in range(2000):
        mask = sample_mask(groups, ranges, rng)
        kappa = mask.kappa_by_group["array"]
        assert mask.kept_count == int(np.floor((1.0 - kappa) * 18))
        assert mask.kept_count in (16, 17)
        assert mask.masked_count == 18 - mask.kept_count


def test_sample_mask_per_sensor_keep_frequency_is_uniform():
    groups = {"g": tuple(range(12))}
    ranges = {"g": (0.0, 0.5)}
    rng = default_rng(3)
    n = 3000
    kept = np.zeros(12)
    p_sum = 0.0
    for _ in range(n):
        mask = sample_mask(groups, ranges, rng)
        kept += mask.kept
        p_sum += mask.kept_count / 12.0
    p = p_sum / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(kept / n - p) < 4 * sigma)


def test_sample_mask_respects_per_group_ranges():
    groups = {"cam": (0, 1, 2), "mic": (3, 4, 5)}
    ranges = {"cam": (0.0, 0.0), "mic": (0.9, 0.9)}
    rng = default_rng(0)
    for _ in range(50):
        mask = sample_mask(groups, ranges, rng)
        # cam never masked, mic keeps floor(0.1 * 3) = 0 sensors
        assert mask.kept[:3].all()
        assert not mask.kept[3:].any()
        assert mask.kappa_by_group["mic"] == 0.9


def test_sample_mask_group_missing_from_ranges_defaults_to_no_masking():
    groups = {"cam": (0, 1), "mic": (2, 3)}
    mask = sample_mask(groups, {"mic": (0.5, 0.5)}, default_rng(1))
    assert mask.kept[0] and mask.kept[1]


def test_sample_mask_is_deterministic_given_rng_state():
    groups = {"g": tuple(range(9))}
    ranges = {"g": (0.1, 0.7)}
    a = sample_mask(groups, ranges, default_rng(42))
    b = sample_mask(groups, ranges, default_rng(42))
    assert np.array_equal(a.kept, b.kept)
    assert a.kappa_by_group == b.kappa_by_group


@pytest.mark.parametrize("bad", [(-0.1, 0.5), (0.6, 0.5), (0.5, 1.2)])
def test_sample_mask_rejects_bad_ranges(bad):
    with pytest.raises(MaskError, match="ratio range"):
        sample_mask({"g": (0, 1)}, {"g": bad}, default_rng(0))


def test_sample_mask_rejects_empty_group():
    with pytest.raises(MaskError, match="empty"):
        sample_mask({"g": ()}, {"g": (0.0, 0.0)}, default_rng(0))


def test_sample_mask_rejects_fully_masked_array():
    with pytest.raises(MaskError, match="every sensor masked"):
        sample_mask({"g": (0, 1, 2)}, {"g": (1.0, 1.0)}, default_rng(0))


def test_removal_mask_hides_exactly_the_requested_sensors():
    mask = removal_mask(5, [1, 3])
    assert mask.kept.tolist() == [True, False, True, False, True]
    assert mask.masked_count == 2


def test_removal_mask_rejects_bad_requests():
    with pytest.raises(MaskError, match="out of range"):
        removal_mask(4, [4])
    with pytest.raises(MaskError, match="every sensor"):
        removal_mask(3, [0, 1, 2])


def test_apply_mask_zeroes_whole_sensor_columns():
    rng = default_rng(5)
    phi = Tensor(rng.normal(size=(2, 3, 4, 5)))
    mask = removal_mask(4, [2])
    out = apply_mask(phi, mask)
    assert np.array_equal(out.data[:, :, 2, :], np.zeros((2, 3, 5)))
    for s in (0, 1, 3):
        assert np.array_equal(out.data[:, :, s, :], phi.data[:, :, s, :])


def test_apply_mask_blocks_gradient_on_masked_sensors():
    rng = default_rng(6)
    phi = Tensor(rng.normal(size=(1, 2, 3, 2)), requires_grad=True)
    out = apply_mask(phi, removal_mask(3, [1]))
    ad.backward(ad.reduce_sum(out))
    assert np.array_equal(phi.grad[:, :, 1, :], np.zeros((1, 2, 2)))
    assert np.all(phi.grad[:, :, 0, :] == 1.0)


def test_apply_mask_rejects_sensor_count_mismatch():
    with pytest.raises(MaskError, match="covers"):
        apply_mask(Tensor(np.zeros((1, 2, 3, 4))), removal_mask(5, [0]))


# -- distillation loss --------------------------------------------------------------


def _pair_of_embeddings(rng, shape):
    return (Tensor(rng.normal(size=shape), requires_grad=True),
            Tensor(rng.normal(size=shape)))


def test_distill_loss_matches_hand_computation():
    rng = default_rng(11)
    b, t, s, e = 2, 3, 4, 5
    online, target = _pair_of_embeddings(rng, (b, t, s, e))
    mask = removal_mask(s, [0, 2])
    loss = distill_loss(online, target, mask)
    diff = (target.data - online.data)[:, :, (0, 2), :]
    expected = float((diff ** 2).sum()) / (b * t * mask.kept_count)
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_distill_loss_ignores_unmasked_sensor_changes():
    rng = default_rng(12)
    online, target = _pair_of_embeddings(rng, (1, 2, 3, 4))
    mask = removal_mask(3, [1])
    base = distill_loss(online, target, mask).item()
    bumped = Tensor(online.data.copy(), requires_grad=True)
    bumped.data[:, :, 0, :] += 100.0
    bumped.data[:, :, 2, :] -= 7.0
    assert distill_loss(bumped, target, mask).item() == base


def test_distill_loss_gradient_stays_on_masked_slots_and_off_target():
    rng = default_rng(13)
    online = Tensor(rng.normal(size=(1, 2, 3, 4)), requires_grad=True)
    target = Tensor(rng.normal(size=(1, 2, 3, 4)), requires_grad=True)
    mask = removal_mask(3, [2])
    ad.backward(distill_loss(online, target, mask))
    assert target.grad is None
    assert np.array_equal(online.grad[:, :, :2, :], np.zeros((1, 2, 2, 4)))
    expected = -2.0 * (target.data - online.data)[:, :, 2, :] / (1 * 2 * 2)
    assert np.allclose(online.grad[:, :, 2, :], expected, atol=1e-12)


def test_distill_loss_normalizer_flag_switches_denominator():
    rng = default_rng(14)
    online, target = _pair_of_embeddings(rng, (1, 1, 5, 2))
    mask = removal_mask(5, [0, 1])
    by_kept = distill_loss(online, target, mask).item()
    by_masked = distill_loss(online, target, mask, normalize_by_masked_count=True).item()
    assert by_masked == pytest.approx(by_kept * mask.kept_count / mask.masked_count, rel=1e-12)


def test_distill_loss_rejects_shape_and_mask_mismatches():
    rng = default_rng(15)
    online, target = _pair_of_embeddings(rng, (1, 2, 3, 4))
    with pytest.raises(MaskError, match="shapes"):
        distill_loss(online, Tensor(np.zeros((1, 2, 3, 5))), removal_mask(3, [0]))
    with pytest.raises(MaskError, match="mask covers"):
        distill_loss(online, target, removal_mask(4, [0]))
    nothing_masked = MaskMatrix(kept=np.ones(3, dtype=bool))
    with pytest.raises(MaskError, match="normalizer"):
        distill_loss(online, target, nothing_masked, normalize_by_masked_count=True)


# -- online / target pair -----------------------------------------------------------


def _toy_store(rng, names=("enc/a", "enc/b")):
    store = ad.ParamStore()
    for n in names:
        store.add(n, rng.normal(size=(3, 2)))
    return store


def test_make_target_copies_values_into_frozen_independent_buffers():
    rng = default_rng(21)
    online = _toy_store(rng)
    pair = make_target(online, ["enc/a", "enc/b"], decay=0.9)
    for n in pair.names:
        assert np.array_equal(pair.target[n].data, online[n].data)
        assert not pair.target[n].requires_grad
    online["enc/a"].data += 1.0
    assert not np.array_equal(pair.target["enc/a"].data, online["enc/a"].data)


def test_make_target_rejects_decay_outside_unit_interval():
    rng = default_rng(22)
    with pytest.raises(ValueError, match="decay"):
        make_target(_toy_store(rng), ["enc/a"], decay=1.5)


def test_ema_replay_from_recorded_trajectory_is_bit_exact():
    rng = default_rng(23)
    online = _toy_store(rng)
    pair = make_target(online, ["enc/a", "enc/b"], decay=0.95)
    replay = {n: pair.target[n].data.copy() for n in pair.names}
    for _ in range(100):
        for n in pair.names:
            online[n].data = online[n].data + rng.normal(size=online[n].data.shape)
        ema_update(pair)
        for n in pair.names:
            replay[n] = 0.95 * replay[n] + (1.0 - 0.95) * online[n].data
    for n in pair.names:
        assert np.array_equal(pair.target[n].data, replay[n])


def test_ema_update_rejects_shape_drift():
    rng = default_rng(24)
    online = _toy_store(rng)
    pair = make_target(online, ["enc/a"], decay=0.5)
    online["enc/a"].data = np.zeros((4, 4))
    with pytest.raises(ValueError, match="shape mismatch"):
        ema_update(pair)


# -- guidance schedule --------------------------------------------------------------


def test_lambda_values_match_the_published_schedule():
    sched = ScheduleSpec(strategy="increase", lambda0=0.01, gamma=1.05, max_epoch=50)
    assert lambda_at(sched, 0) == pytest.approx(0.01, abs=1e-12)
    assert lambda_at(sched, 50) == pytest.approx(0.11467, abs=1e-5)


def test_decrease_schedule_mirrors_increase():
    inc = ScheduleSpec(strategy="increase", lambda0=0.01, gamma=1.05, max_epoch=50)
    dec = ScheduleSpec(strategy="decrease", lambda0=0.01, gamma=1.05, max_epoch=50)
    for n in range(51):
        assert lambda_at(dec, n) == pytest.approx(lambda_at(inc, 50 - n), rel=1e-12)


def test_schedule_monotonicity_and_budget():
    inc = ScheduleSpec(strategy="increase", lambda0=0.02, gamma=1.1, max_epoch=20)
    dec = ScheduleSpec(strategy="decrease", lambda0=0.02, gamma=1.1, max_epoch=20)
    const = ScheduleSpec(strategy="constant", lambda0=0.02, gamma=1.1, max_epoch=20)
    off = ScheduleSpec(strategy="off", lambda0=0.02, gamma=1.1, max_epoch=20)
    inc_vals = [lambda_at(inc, n) for n in range(21)]
    dec_vals = [lambda_at(dec, n) for n in range(21)]
    assert all(b >= a for a, b in zip(inc_vals, inc_vals[1:]))
    assert all(b <= a for a, b in zip(dec_vals, dec_vals[1:]))
    # the constant strategy spreads the increase curve's budget evenly
    assert lambda_at(const, 0) == lambda_at(const, 20) == pytest.approx(sum(inc_vals) / 20)
    assert lambda_at(off, 7) == 0.0


def test_lambda_rejects_negative_epochs_and_unknown_strategies():
    with pytest.raises(ValueError, match="negative epoch"):
        lambda_at(ScheduleSpec(), -1)
    with pytest.raises(ValueError, match="unknown strategy"):
        ScheduleSpec(strategy="wavy")


# -- train step ---------------------------------------------------------------------


def _tiny_setup(method_id="F", seed=31, **model_kw):
    world = tiny_world(seed=3)
    split = generate_dataset(world, sizes=(6, 2, 2))
    cfg = ModelConfig(embed_dim=6, num_blocks=1, num_heads=2, ffn_hidden=8, **model_kw)
    rng = default_rng(SeedSequence([seed]))
    model = build_model(method_id, world, cfg, rng)
    return world, split, model, rng


def test_train_step_combines_task_and_scaled_guidance():
    _, split, model, rng = _tiny_setup()
    optimizer = AdamW(model.params, lr=1e-3, weight_decay=0.0, names=model.trainable_names)
    pair = make_target(model.params, model.encoder_names, decay=0.9)
    # nudge the target so the guidance term is nonzero
    for n in pair.names:
        pair.target[n].data = pair.target[n].data + 0.01
    feats, weak = stack_batch(split.train[:4])
    weights = class_weights(split.class_counts)
    stats = train_step(model, optimizer, pair, feats, weak, weights, lam=0.3, rng=rng)
    assert stats.distill > 0.0
    assert stats.loss == pytest.approx(stats.task_loss + 0.3 * stats.distill, rel=1e-12)


def test_train_step_with_zero_lambda_never_consults_the_target():
    # two runs whose targets hold wildly different values must produce
    # bit-identical online parameters when lam is zero
    outcomes = []
    for target_fill in (1e6, -3.0):
        _, split, model, rng = _tiny_setup("G", seed=31)
        optimizer = AdamW(model.params, lr=1e-3, weight_decay=0.0,
                          names=model.trainable_names)
        pair = make_target(model.params, model.encoder_names, decay=0.9)
        for n in pair.names:
            pair.target[n].data = np.full_like(pair.target[n].data, target_fill)
        feats, weak = stack_batch(split.train[:4])
        weights = class_weights(split.class_counts)
        stats = train_step(model, optimizer, pair, feats, weak, weights,
                           lam=0.0, rng=rng)
        assert stats.distill == 0.0
        assert stats.loss == stats.task_loss
        outcomes.append({n: model.params[n].data.copy() for n in model.trainable_names})
    for n, value in outcomes[0].items():
        assert np.array_equal(value, outcomes[1][n])


def test_train_step_moves_target_by_the_ema_recurrence():
    _, split, model, rng = _tiny_setup()
    optimizer = AdamW(model.params, lr=1e-2, weight_decay=0.0, names=model.trainable_names)
    pair = make_target(model.params, model.encoder_names, decay=0.95)
    before = {n: pair.target[n].data.copy() for n in pair.names}
    feats, weak = stack_batch(split.train[:4])
    weights = class_weights(split.class_counts)
    train_step(model, optimizer, pair, feats, weak, weights, lam=0.1, rng=rng)
    for n in pair.names:
        expected = 0.95 * before[n] + (1.0 - 0.95) * model.params[n].data
        assert np.array_equal(pair.target[n].data, expected)


def test_train_step_skips_guidance_when_nothing_is_masked():
    _, split, model, rng = _tiny_setup()
    model.mask_ranges = {name: (0.0, 0.0) for name in model.groups}
    optimizer = AdamW(model.params, lr=1e-3, weight_decay=0.0, names=model.trainable_names)
    pair = make_target(model.params, model.encoder_names, decay=0.9)
    feats, weak = stack_batch(split.train[:4])
    weights = class_weights(split.class_counts)
    stats = train_step(model, optimizer, pair, feats, weak, weights, lam=0.5, rng=rng)
    assert stats.distill == 0.0
    assert stats.loss == stats.task_loss


# -- train loop ---------------------------------------------------------------------


def _loop_cfg(**kw):
    base = dict(lr=0.003, weight_decay=0.001, max_epoch=3, batch_size=4,
                schedule=ScheduleSpec(max_epoch=3))
    base.update(kw)
    return TrainLoopConfig(**base)


def test_train_loop_history_and_step_accounting():
    _, split, model, rng = _tiny_setup()
    cfg = _loop_cfg()
    result = train_loop(model, split, cfg, rng)
    assert [h.epoch for h in result.history] == [0, 1, 2]
    batches_per_epoch = int(np.ceil(len(split.train) / cfg.batch_size))
    assert result.steps == 3 * batches_per_epoch
    assert result.history[-1].step == result.steps
    lrs = [h.lr for h in result.history]
    assert lrs[0] == cfg.lr and lrs[2] == pytest.approx(cfg.lr * cfg.lr_factor() ** 2)
    lams = [h.lam for h in result.history]
    assert lams == [lambda_at(cfg.schedule, n) for n in range(3)]


def test_train_loop_keeps_the_best_validation_checkpoint():
    _, split, model, rng = _tiny_setup()
    cfg = _loop_cfg(max_epoch=4, schedule=ScheduleSpec(max_epoch=4))
    result = train_loop(model, split, cfg, rng)
    vals = [h.val_task_loss for h in result.history]
    assert result.best_val == min(vals)
    assert result.best_epoch == int(np.argmin(vals))
    # reloading the snapshot reproduces the recorded validation loss exactly
    model.load_params(result.best_params)
    weights = class_weights(split.class_counts)
    replay = validation_loss(model, split.val, weights, cfg.batch_size)
    assert replay == result.best_val


def test_validation_loss_is_computed_on_unmasked_views():
    _, split, model, rng = _tiny_setup()
    cfg = _loop_cfg(max_epoch=1, schedule=ScheduleSpec(max_epoch=1))
    result = train_loop(model, split, cfg, rng)
    weights = class_weights(split.class_counts)
    with ad.no_grad():
        from meldlab.classifier import bag_pool, weighted_bce
        total = 0.0
        for clip in split.val:
            feats, weak = stack_batch([clip])
            posteriors, _ = model.forward(feats, mask=None)
            total += weighted_bce(bag_pool(posteriors), weak, weights).item()
    assert result.history[-1].val_task_loss == pytest.approx(total / len(split.val), rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_loop_aborts_with_a_diagnostic_on_divergence():
    _, split, model, rng = _tiny_setup()
    # a finite but astronomically large norm gain makes the attention scores
    # overflow to inf and their softmax to nan inside the first step
    name = next(n for n in model.trainable_names if n.endswith("ln1/gain"))
    model.params[name].data[:] = 1e200
    with pytest.raises(TrainingError, match="diverged"):
        train_loop(model, split, _loop_cfg(), rng)
