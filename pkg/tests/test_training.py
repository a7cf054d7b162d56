import numpy as np
import pytest

from radiodx import network, training
from radiodx.network import HeadSpec
from radiodx.training import EpochRecord, TrainConfig

from conftest import brightness_set


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    return brightness_set(root / "train", 16, seed=1), brightness_set(root / "val", 8, seed=2)


def small_model(seed=0, freeze=True):
    return network.build_model("tiny", HeadSpec((32, 16)), init_seed=seed, input_size=64, freeze_backbone=freeze)


def cfg(**kw):
    base = dict(epochs=3, batch_size=8, learning_rate=1e-3, augmentation=None, input_size=64, run_seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_identical_model(data):
    m = small_model()
    before = network.save_weights(m)
    best, history = training.fit(m, *data, cfg(epochs=0))
    assert history == [] and network.save_weights(best) == before == network.save_weights(m)


def test_frozen_backbone_untouched(data):
    m = small_model()
    before = {k: v.tobytes() for k, v in network.snapshot(m).items()}
    best, history = training.fit(m, *data, cfg(epochs=2))
    after = {k: v.tobytes() for k, v in network.snapshot(m).items()}
    for name in before:
        if name.startswith("backbone."):
            assert before[name] == after[name]
        else:
            assert before[name] != after[name]
    assert len(history) == 2


def test_freeze_all_then_step_changes_nothing(data):
    m = small_model()
    m.set_trainable("*", False)
    before = network.save_weights(m)
    opt = training.make_optimizer(m, cfg())
    assert opt.params == []
    batch = np.random.default_rng(0).random((4, 3, 64, 64)).astype(np.float32)
    training.train_step(m, opt, batch, np.array([0, 1, 0, 1]))
    assert network.save_weights(m) == before


@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_optimizer_state_only_for_trainable(opt):
    m = small_model()
    o = training.make_optimizer(m, cfg(optimizer=opt))
    trainable = [p for _, p in m.named_parameters() if p.trainable]
    assert len(o.params) == len(trainable) == 6
    if opt == "adam":
        assert len(o.m) == len(o.v) == 6


def test_sgd_step_direction():
    m = network.build_sequential(2, [1], ["sigmoid"], seed=0)
    p = m.layer("dense1").params["weight"]
    p.grad[...] = 1.0
    before = p.value.copy()
    training.SGD([p], 0.5).step()
    np.testing.assert_allclose(p.value, before - 0.5)


def test_adam_first_step_is_lr_sized():
    p = network.Parameter(np.zeros(3, np.float32))
    p.grad[...] = [2.0, -0.5, 1e-3]
    training.Adam([p], 0.01).step()
    np.testing.assert_allclose(p.value, [-0.01, 0.01, -0.01], rtol=1e-3)


def test_fit_deterministic(data):
    a, ha = training.fit(small_model(), *data, cfg(epochs=3))
    b, hb = training.fit(small_model(), *data, cfg(epochs=3))
    assert training.history_csv(ha) == training.history_csv(hb)
    assert network.save_weights(a) == network.save_weights(b)


def test_best_checkpoint_is_earliest_max(data):
    c = cfg(epochs=6, learning_rate=3e-3)
    best, history = training.fit(small_model(), *data, c)
    accs = [r.val_acc for r in history]
    best_epoch = accs.index(max(accs))
    # replaying up to the best epoch ends on exactly the retained weights
    m = small_model()
    training.fit(m, *data, cfg(epochs=best_epoch + 1, learning_rate=3e-3))
    assert network.save_weights(m) == network.save_weights(best)


def test_augmented_fit_runs(data):
    from radiodx.augmentation import AugmentationPolicy
    _, history = training.fit(small_model(), *data, cfg(epochs=1, augmentation=AugmentationPolicy()))
    assert 0 <= history[0].train_acc <= 1 and history[0].train_loss >= 0


def test_non_finite_loss_aborts(data, monkeypatch):
    monkeypatch.setattr(training, "bce_loss", lambda p, y: (np.full(len(y), np.nan), np.zeros(len(y))))
    with pytest.raises(training.TrainingError, match="epoch 0, batch 0"):
        training.fit(small_model(), *data, cfg(epochs=1))


def test_history_stats_examples():
    s = training.history_stats([EpochRecord(i, 0.1, 0.9, 0.9) for i in range(5)])
    assert (s.min, s.mean, s.max, s.std) == pytest.approx((0.9, 0.9, 0.9, 0.0))
    s = training.history_stats([EpochRecord(0, 0, 0, 0.8), EpochRecord(1, 0, 0, 1.0)])
    assert s.mean == pytest.approx(0.9) and s.std == pytest.approx(0.1)
    s = training.history_stats([EpochRecord(0, 0, 0, 0.853)])
    assert s.min == s.max == 0.853 and s.std == 0
    with pytest.raises(ValueError):
        training.history_stats([])


def test_history_csv_and_svg():
    h = [EpochRecord(0, 0.7, 0.5, 0.55), EpochRecord(1, 0.4, 0.75, 0.8)]
    text = training.history_csv(h)
    assert text.splitlines()[0] == "epoch,train_loss,train_acc,val_acc"
    assert training.parse_history_csv(text) == h
    svg = training.history_svg(h)
    assert svg.count("<polyline") == 2 and ">epoch<" in svg and ">accuracy<" in svg


@pytest.mark.parametrize("kw", [dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0), dict(optimizer="rmsprop")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
