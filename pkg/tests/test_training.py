"""Optimizer recurrences, the cooling schedule, augmentation, and
end-to-end properties of the training loop on tiny models."""

import math

import numpy as np
import pytest

from ibgc import losses as L
from ibgc import tensor as T
from ibgc.errors import NumericError
from ibgc.model import GenerativeClassifier, ModelConfig
from ibgc.training import (SGD, PlateauSchedule, TrainConfig, augment_batch,
                           evaluate, train)


def make_param(value):
    return T.Tensor(np.array(value, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------- sgd

def test_sgd_no_gradient_is_identity():
    p = make_param([1.0, -2.0])
    opt = SGD([p], [False], lr=0.1, momentum=0.9, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(opt.velocity[0], [0.0, 0.0])


def test_sgd_single_plain_step():
    p = make_param([0.0])
    opt = SGD([p], [False], lr=0.1, momentum=0.0, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.1], atol=1e-15)


def test_sgd_momentum_two_step_recurrence():
    # v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
    p = make_param([0.0])
    opt = SGD([p], [False], lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    np.testing.assert_allclose(p.data, [-0.29], atol=1e-15)


def test_sgd_coupled_weight_decay():
    # decay joins the gradient: p = 1 - 0.1 * (0 + 0.1 * 1) = 0.99
    p = make_param([1.0])
    opt = SGD([p], [True], lr=0.1, momentum=0.0, weight_decay=0.1)
    p.grad = np.array([0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.99], atol=1e-15)
    # an undecayed parameter with zero gradient stays put
    q = make_param([1.0])
    opt2 = SGD([q], [False], lr=0.1, momentum=0.0, weight_decay=0.1)
    q.grad = np.array([0.0])
    opt2.step()
    np.testing.assert_array_equal(q.data, [1.0])


def test_sgd_rejects_non_finite_gradient():
    p = make_param([0.0])
    opt = SGD([p], [False], lr=0.1, momentum=0.0, weight_decay=0.0)
    p.grad = np.array([math.nan])
    with pytest.raises(NumericError):
        opt.step()


def test_sgd_zero_grad_clears():
    p = make_param([0.0])
    opt = SGD([p], [False], lr=0.1, momentum=0.0, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.zero_grad()
    assert p.grad is None


# ----------------------------------------------------------------- schedule

def test_schedule_keeps_rate_while_improving():
    sched = PlateauSchedule(0.1, patience=2, max_coolings=2, factor=10.0)
    for loss in [5.0, 4.0, 3.0, 2.0]:
        assert sched.update(loss) == 0.1


def test_schedule_cools_after_patience():
    sched = PlateauSchedule(0.1, patience=2, max_coolings=2, factor=10.0)
    assert sched.update(1.0) == 0.1   # first value improves on +inf
    assert sched.update(1.0) == 0.1   # one stale epoch
    assert abs(sched.update(1.0) - 0.01) < 1e-15  # second -> cool


def test_schedule_cools_at_most_twice():
    sched = PlateauSchedule(0.1, patience=1, max_coolings=2, factor=10.0)
    lr = 0.1
    for _ in range(10):
        lr = sched.update(1.0)
    assert abs(lr - 0.001) < 1e-15  # 0.1 -> 0.01 -> 0.001, never further


def test_milestones_cool_on_fixed_epochs():
    model, x, labels = tiny_setup()
    cfg = TrainConfig(beta=1.0, epochs=5, batch_size=32, lr=0.01,
                      milestones=(2, 4), augment=False, seed=3)
    history = train(model, x, labels, cfg)
    assert [round(r["lr"], 10) for r in history] == [0.01, 0.01, 0.001, 0.001, 0.0001]


def test_schedule_counter_resets_on_improvement():
    sched = PlateauSchedule(0.1, patience=2, max_coolings=2, factor=10.0)
    sched.update(2.0)
    sched.update(2.0)           # one stale epoch
    assert sched.update(1.5) == 0.1  # improvement resets the counter
    sched.update(1.5)
    assert sched.update(1.5) == 0.1 / 10  # two stale epochs again


# ------------------------------------------------------------- augmentation

def test_flip_twice_restores_batch():
    rng = np.random.default_rng(0)
    x = rng.random((10, 1, 8, 8))
    a = augment_batch(x, np.random.default_rng(42), crop=False)
    b = augment_batch(a, np.random.default_rng(42), crop=False)
    np.testing.assert_array_equal(b, x)


def test_flip_only_outputs_are_flips():
    rng = np.random.default_rng(1)
    x = rng.random((20, 1, 6, 6))
    out = augment_batch(x, np.random.default_rng(7), crop=False)
    for i in range(20):
        same = np.array_equal(out[i], x[i])
        flipped = np.array_equal(out[i], x[i, :, :, ::-1])
        assert same or flipped


def test_crop_outputs_are_one_pixel_shifts():
    rng = np.random.default_rng(2)
    x = rng.random((12, 1, 8, 8))
    out = augment_batch(x, np.random.default_rng(3))
    pads = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    flipped = np.pad(x[:, :, :, ::-1], ((0, 0), (0, 0), (1, 1), (1, 1)))
    for i in range(12):
        hits = 0
        for base in (pads, flipped):
            for dy in range(3):
                for dx in range(3):
                    if np.array_equal(out[i], base[i, :, dy:dy + 8, dx:dx + 8]):
                        hits += 1
        assert hits >= 1


def test_augment_draw_order_is_deterministic():
    x = np.random.default_rng(4).random((6, 1, 8, 8))
    a = augment_batch(x, np.random.default_rng(11))
    b = augment_batch(x, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(dequant_amplitude=-0.1).validate()
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=-1.0).validate()
    for bad in ((0,), (5, 5), (7, 3), (2.5,)):
        with pytest.raises(ValueError):
            TrainConfig(milestones=bad).validate()
    TrainConfig().validate()
    TrainConfig(milestones=(3, 8)).validate()


# ------------------------------------------------------------ training loop

def tiny_setup(n=64, channels=8, n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n)
    x = rng.standard_normal((n, channels, 1, 1)) * 0.3
    x[labels == 1, 0] += 2.0
    model = GenerativeClassifier(
        ModelConfig(image_shape=(channels, 1, 1), n_classes=n_classes,
                    depth=3, hidden=6, seed=seed))
    return model, x, labels


def batch_loss(model, x, labels, beta):
    w = model.head.log_priors
    targets = L.smooth_labels(labels, model.head.n_classes)
    z, logdet = model.encode(x)
    d2 = model.distances_t(z)
    lx = L.loss_x(logdet, d2, w)
    ly = L.loss_y(d2, w, targets)
    return float(T.mean(L.ib_objective(lx, ly, beta)).data)


def test_single_small_step_reduces_batch_loss():
    model, x, labels = tiny_setup()
    before = batch_loss(model, x, labels, beta=2.0)
    cfg = TrainConfig(beta=2.0, epochs=1, batch_size=64, lr=1e-5,
                      augment=False, dequant_amplitude=0.0, clip_norm=0.0,
                      seed=1)
    train(model, x, labels, cfg)
    after = batch_loss(model, x, labels, beta=2.0)
    assert after < before


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model, x, labels = tiny_setup()
        cfg = TrainConfig(beta=2.0, epochs=3, batch_size=16, lr=1e-3, seed=5)
        hist = train(model, x, labels, cfg)
        final = np.concatenate([p.data.ravel() for _, p in model.params()])
        runs.append((hist, final))
    (h1, p1), (h2, p2) = runs
    assert h1 == h2
    np.testing.assert_array_equal(p1, p2)


def test_beta_zero_skips_class_term_and_improves_bpd():
    model, x, labels = tiny_setup(n=128)
    cfg = TrainConfig(beta=0.0, epochs=6, batch_size=32, lr=1e-3,
                      augment=False, seed=2)
    hist = train(model, x, labels, cfg)
    assert all(math.isnan(r["l_y"]) for r in hist)
    assert hist[-1]["bpd"] < hist[0]["bpd"]


def test_history_schema_and_lr_column():
    model, x, labels = tiny_setup()
    cfg = TrainConfig(beta=1.0, epochs=2, batch_size=32, lr=1e-3, seed=3)
    hist = train(model, x, labels, cfg)
    assert len(hist) == 2
    for i, row in enumerate(hist):
        assert row["epoch"] == i
        for key in ("lr", "l_x", "l_y", "total", "acc", "bpd"):
            assert key in row
        assert 0.0 <= row["acc"] <= 1.0


def test_divergence_raises_numeric_error():
    model, x, labels = tiny_setup()
    cfg = TrainConfig(beta=2.0, epochs=3, batch_size=64, lr=1e6,
                      augment=False, clip_norm=0.0, seed=4)
    with pytest.raises(NumericError):
        train(model, x, labels, cfg)


def test_velocities_and_params_stay_finite():
    model, x, labels = tiny_setup()
    cfg = TrainConfig(beta=2.0, epochs=3, batch_size=16, lr=5e-3, seed=6)
    train(model, x, labels, cfg)
    for _, p in model.params():
        assert np.all(np.isfinite(p.data))


def test_gradient_clipping_bounds_update():
    # with clip_norm c, the first step moves parameters by at most lr*c
    model, x, labels = tiny_setup()
    before = np.concatenate([p.data.ravel() for _, p in model.params()])
    c = 1e-3
    cfg = TrainConfig(beta=2.0, epochs=1, batch_size=64, lr=0.1, clip_norm=c,
                      weight_decay=0.0, augment=False, dequant_amplitude=0.0,
                      seed=7)
    train(model, x, labels, cfg)
    after = np.concatenate([p.data.ravel() for _, p in model.params()])
    assert np.linalg.norm(after - before) <= 0.1 * c * (1 + 1e-9)


def test_on_epoch_callback_streams_rows():
    model, x, labels = tiny_setup()
    seen = []
    cfg = TrainConfig(beta=1.0, epochs=2, batch_size=32, lr=1e-3, seed=8)
    hist = train(model, x, labels, cfg, on_epoch=seen.append)
    assert seen == hist


def test_evaluate_reports_sane_metrics():
    model, x, labels = tiny_setup(n=48)
    out = evaluate(model, x, labels)
    assert set(out) == {"acc", "mean_ll", "bpd", "mean_entropy"}
    assert 0.0 <= out["acc"] <= 1.0
    assert out["mean_entropy"] >= 0.0
    assert math.isfinite(out["bpd"])
