import numpy as np
import pytest

from nanoconv import accounting, model, numerics, training
from nanoconv.accounting import LayerSpec
from nanoconv.data import synthetic_dataset
from nanoconv.errors import InvalidArgument, NumericalFailure
from nanoconv.regularization import NONE, RegularizerWeights
from nanoconv.training import TrainConfig


@pytest.fixture(scope="module")
def cifar_cfg():
    return model.preset("cifar10")


def test_forward_shapes(cifar_cfg):
    p = model.init_params(cifar_cfg, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (4, 1, 32, 32)).astype(np.float32)
    assert model.forward(p, cifar_cfg, x).shape == (4, 10)
    with pytest.raises(InvalidArgument):
        model.forward(p, cifar_cfg, x[:, :, :16])


def test_zero_params_give_zero_logits(cifar_cfg):
    p = {k: np.zeros_like(v) for k, v in model.init_params(cifar_cfg).items()}
    logits = model.forward(p, cifar_cfg, np.ones((2, 1, 32, 32), np.float32))
    assert not logits.any()
    ce, _ = model.softmax_cross_entropy(logits, np.array([3, 7]))
    assert ce == pytest.approx(np.log(10))


def test_cross_entropy_limits():
    ce, g = model.softmax_cross_entropy(np.zeros((5, 10)), np.arange(5))
    assert ce == pytest.approx(np.log(10))
    big = np.zeros((2, 10))
    big[0, 1] = big[1, 4] = 200.0
    ce, _ = model.softmax_cross_entropy(big, np.array([1, 4]))
    assert ce == pytest.approx(0.0, abs=1e-12)


def test_loss_with_confident_logits_is_regularizer_only(f64):
    cfg = model.preset("toy")
    p = model.init_params(cfg, seed=0)
    p["head.bias"] = np.array([0.0, 500.0, 0.0])
    p["head.weight"][:] = 0
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 8, 8))
    regs = RegularizerWeights()
    loss, _, parts = model.loss_and_grads(p, cfg, x, np.array([1, 1, 1]), regs)
    assert parts["ce"] == pytest.approx(0.0, abs=1e-12)
    assert loss == pytest.approx(parts["reg"])


def test_invalid_labels():
    cfg = model.preset("toy")
    p = model.init_params(cfg)
    with pytest.raises(InvalidArgument):
        model.loss_and_grads(p, cfg, np.zeros((2, 1, 8, 8)), np.array([0, 3]), NONE)


@pytest.mark.parametrize("variant", ["LKSV", "SKSI", "LKSI", "SKSV"])
def test_toy_gradients_every_variant(f64, variant):
    cfg = model.preset("toy", variant)
    g = np.random.default_rng(1)
    p = {k: v + 0.05 * g.standard_normal(v.shape) for k, v in model.init_params(cfg, seed=2).items()}
    x = g.uniform(0, 1, (2, 1, 8, 8))
    y = np.array([0, 2])
    regs = RegularizerWeights(lambda_tv=1e-2, lambda_spec_highpass=1e-2, lambda_spec_cond=1e-3, pad=16)
    _, grads, _ = model.loss_and_grads(p, cfg, x, y, regs)
    rep = numerics.finite_difference_check(lambda q: model.loss_and_grads(q, cfg, x, y, regs)[0], p, grads,
                                           max_coords=25)
    assert rep.passed, str(rep)


def test_full_preset_gradient_subset(f64, cifar_cfg):
    g = np.random.default_rng(3)
    p = model.init_params(cifar_cfg, seed=0)
    x = g.uniform(0, 1, (2, 1, 32, 32))
    y = np.array([1, 8])
    regs = RegularizerWeights()
    _, grads, _ = model.loss_and_grads(p, cifar_cfg, x, y, regs)
    rep = numerics.finite_difference_check(lambda q: model.loss_and_grads(q, cifar_cfg, x, y, regs)[0], p, grads,
                                           max_coords=4, epsilon=1e-7)
    assert rep.passed, str(rep)


def test_frozen_loss_has_no_optical_grads():
    cfg = model.preset("toy")
    p = model.init_params(cfg)
    _, grads, _ = model.loss_and_grads(p, cfg, np.ones((2, 1, 8, 8)), np.array([0, 1]), NONE, freeze_optical=True)
    assert not any(model.is_optical(k) for k in grads)


def test_pair_decompose_examples(rng):
    kp, kn = model.pair_decompose(np.array([[1.0, -2.0], [0.0, 3.0]]))
    assert np.array_equal(kp, [[1, 0], [0, 3]]) and np.array_equal(kn, [[0, 2], [0, 0]])
    kp, kn = model.pair_decompose(np.abs(rng.standard_normal((4, 4))))
    assert not kn.any()
    k = rng.standard_normal((5, 15, 15)).astype(np.float32)
    kp, kn = model.pair_decompose(k)
    assert np.array_equal(kp - kn, k)
    assert np.all(np.minimum(kp, kn) == 0) and np.all(kp >= 0) and np.all(kn >= 0)


# --------------------------------------------------------------------------
# Accounting
# --------------------------------------------------------------------------


def test_mac_examples(cifar_cfg):
    assert accounting.count_macs(cifar_cfg, layers=[])["electronic"] == 0
    assert LayerSpec("conv", 64, 9, 10).macs == 576


def test_lksv_accounting(cifar_cfg):
    macs = accounting.count_macs(cifar_cfg)
    params = accounting.count_params(cifar_cfg)
    assert macs["optical"] == 25 * 32 * 32 * 225 * 6 + 25 * 32 * 32 * 6
    assert abs(macs["optical"] - 34.61e6) / 34.61e6 < 0.05
    assert macs["optical"] / (macs["optical"] + macs["electronic"]) > 0.99
    assert abs(params["electronic"] - 2.18e3) / 2.18e3 < 0.10


def test_accounting_hand_count_three_presets():
    for name in ("cifar10", "toy", "imagenet64"):
        cfg = model.preset(name)
        C, H, W = cfg.stem.channels_out, cfg.stem.height, cfg.stem.width
        P, kd, h2, w2 = cfg.pointwise_channels, cfg.depthwise_kernel, H // cfg.pool, W // cfg.pool
        heads = P * cfg.head_grid**2
        hand = C * H * W * 2 + C * h2 * w2 * kd * kd + P * h2 * w2 * C + cfg.classes * heads
        assert accounting.count_macs(cfg)["electronic"] == hand
        hand_p = C + (C * kd * kd + C) + (P * C + P) + (cfg.classes * heads + cfg.classes)
        assert accounting.count_params(cfg)["electronic"] == hand_p
        assert sum(v.size for k, v in model.init_params(cfg).items() if not model.is_optical(k)) == hand_p
        assert sum(v.size for k, v in model.init_params(cfg).items() if model.is_optical(k)) == \
            accounting.count_params(cfg)["optical"]


def test_sksi_params_and_channel_scaling():
    assert accounting.count_params(model.preset("cifar10", "SKSI"))["optical"] == 225
    from dataclasses import replace
    cfg = model.preset("cifar10")
    twice = replace(cfg, stem=replace(cfg.stem, channels_out=50))
    assert accounting.count_params(twice)["optical"] == 2 * accounting.count_params(cfg)["optical"]


def test_ablation_table_rows(cifar_cfg):
    rows = accounting.ablation_table(cifar_cfg)
    assert [r["variant"] for r in rows] == ["SKSI", "LKSI", "SKSV", "LKSV"]
    assert rows[-1]["mac_optical_share"] > 0.99


# --------------------------------------------------------------------------
# Training / evaluation
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    return synthetic_dataset(512, seed=0)


def test_training_reduces_loss_and_is_deterministic(cifar_cfg, small_data):
    tc = TrainConfig(epochs=2, seed=4)
    p1, r1 = training.train(cifar_cfg, tc, small_data.images, small_data.labels)
    assert r1.epoch_loss[-1] < r1.initial_loss
    p2, r2 = training.train(cifar_cfg, tc, small_data.images, small_data.labels)
    assert r1.epoch_loss == r2.epoch_loss
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_freeze_optical_keeps_stem(small_data):
    cfg = model.preset("cifar10", "SKSI")
    p0 = model.init_params(cfg, seed=1)
    p, _ = training.train(cfg, TrainConfig(epochs=1, seed=1, freeze_optical=True), small_data.images,
                          small_data.labels, params=p0)
    for k in p0:
        assert np.array_equal(p[k], p0[k]) == model.is_optical(k)


def test_train_errors(cifar_cfg):
    with pytest.raises(InvalidArgument):
        training.train(cifar_cfg, TrainConfig(epochs=1), np.zeros((0, 1, 32, 32)), np.zeros(0))
    with pytest.raises(InvalidArgument):
        training.train(cifar_cfg, TrainConfig(epochs=1), np.zeros((3, 1, 32, 32)), np.zeros(2))
    with pytest.raises(InvalidArgument):
        TrainConfig(batch_size=0)


def test_divergence_raises(small_data):
    cfg = model.preset("toy")
    x = np.full((4, 1, 8, 8), np.nan, np.float32)
    with pytest.raises(NumericalFailure):
        training.train(cfg, TrainConfig(epochs=1), x, np.array([0, 1, 2, 0]))


def test_confusion_and_accuracy_contracts():
    labels = np.repeat(np.arange(10), 7)
    cm = training.confusion_matrix(labels, labels, 10)
    assert np.array_equal(cm, 7 * np.eye(10, dtype=int))
    cm = training.confusion_matrix(labels, np.full_like(labels, 3), 10)
    assert np.trace(cm) / cm.sum() == pytest.approx(0.10)
    assert np.array_equal(cm.sum(axis=1), np.full(10, 7))


def test_predict_ties_lowest_index():
    cfg = model.preset("toy")
    p = {k: np.zeros_like(v) for k, v in model.init_params(cfg).items()}
    assert np.array_equal(training.predict(p, cfg, np.ones((3, 1, 8, 8), np.float32)), [0, 0, 0])


def test_random_init_accuracy_near_chance(cifar_cfg):
    ds = synthetic_dataset(1000, seed=9)
    acc, cm = training.evaluate(model.init_params(cifar_cfg, seed=0), cifar_cfg, ds.images, ds.labels)
    assert 0.05 <= acc <= 0.15
    assert cm.sum() == 1000
