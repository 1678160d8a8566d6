import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from opticnet.data import make_synthetic
from opticnet.model import assemble_model, tiny_config
from opticnet.tensor import ContractError, Tensor, Variable
from opticnet.training import (LOG_COLUMNS, LRScheduleState, OptimizerState, TrainConfig, adam_step, batches,
                               evaluate, predict_logits, scheduler_step, train)


def tiny_setup(seed=0, classes=3, per_class=3):
    ds = make_synthetic(classes, per_class, 8, seed=seed)
    return assemble_model(tiny_config(classes=classes), seed=seed, dtype=np.float64), ds


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_parameter():
    w = Variable(np.array([0.3, -1.2]), dtype=np.float64)
    w.grad = np.zeros(2)
    st_ = OptimizerState()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(5):
            adam_step([w], st_, 1e-3)
    assert w.data.tolist() == [0.3, -1.2]
    assert not st_.m[id(w)].any() and not st_.v[id(w)].any() and st_.t == 5


def test_adam_first_step_scalar():
    w = Variable(np.array([1.0]), dtype=np.float64)
    w.grad = np.array([1.0])
    adam_step([w], OptimizerState(), 1e-4)
    assert w.data[0] - 1.0 == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-9)


def test_adam_matches_hand_recurrence():
    b1, b2, eps, lr = 0.9, 0.99, 1e-8, 1e-2
    g = 0.7
    w = Variable(np.array([2.0]), dtype=np.float64)
    st_ = OptimizerState(b1, b2, eps)
    want, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        w.grad = np.array([g])
        adam_step([w], st_, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        want -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert w.data[0] == pytest.approx(want, rel=1e-12)
    assert st_.v[id(w)].min() >= 0


def test_adam_warns_on_all_zero_grads():
    w = Variable(np.ones(2), dtype=np.float64)
    with pytest.warns(UserWarning):
        adam_step([w], OptimizerState(), 1e-3)


# ---------------------------------------------------------------- schedule


def run_schedule(losses):
    s = LRScheduleState()
    return [scheduler_step(s, l) for l in losses]


def test_decreasing_loss_keeps_lr():
    assert set(run_schedule([1.0 - 0.01 * i for i in range(30)])) == {1e-4}


def test_flat_loss_decays_at_epoch_6():
    lrs = run_schedule([1.0] * 8)
    # epoch 0 sets the best; epochs 1..6 are six non-improving epochs
    assert lrs[:6] == [1e-4] * 6
    assert lrs[6] == 1e-5
    assert lrs[7] == 1e-5


def test_flat_loss_clamps_at_floor():
    lrs = run_schedule([1.0] * 48)
    assert lrs[-1] == 1e-8
    assert min(lrs) == 1e-8


@given(st.lists(st.floats(0, 10), min_size=1, max_size=80))
def test_lr_monotone_and_bounded(losses):
    lrs = run_schedule(losses)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 1e-8


def test_train_config_invariants():
    for bad in (dict(gamma=1.0), dict(gamma=0.0), dict(lr=1e-9, lr_min=1e-8), dict(patience=0)):
        with pytest.raises(ContractError):
            TrainConfig(**bad)


def test_defaults_follow_reference_recipe():
    c = TrainConfig()
    assert (c.batch_size, c.epochs, c.lr, c.gamma, c.patience, c.lr_min, c.beta1, c.beta2) == \
        (8, 30, 1e-4, 0.1, 6, 1e-8, 0.9, 0.99)


# ---------------------------------------------------------------- loop


def test_batches_cover_each_epoch_once():
    got = np.concatenate(list(batches(13, 4, seed=1, epoch=2)))
    assert sorted(got.tolist()) == list(range(13))
    assert not np.array_equal(got, np.concatenate(list(batches(13, 4, seed=1, epoch=3))))


def test_lr_zero_leaves_parameters_bitwise(tmp_path):
    model, ds = tiny_setup()
    before = {p: v.data.copy() for p, v in model.named_variables()}
    res = train(model, ds, TrainConfig(lr=0.0, lr_min=0.0, epochs=3, batch_size=4), run_dir=tmp_path)
    for p, v in model.named_variables():
        assert np.array_equal(v.data, before[p]), p
    assert len(res.rows) == 3


def test_same_seed_same_log(tmp_path):
    logs = []
    for i in range(2):
        model, ds = tiny_setup()
        train(model, ds, TrainConfig(epochs=2, batch_size=4), run_dir=tmp_path / str(i))
        logs.append((tmp_path / str(i) / "log.csv").read_text())
    assert logs[0] == logs[1]


def test_log_and_checkpoint_written(tmp_path):
    model, ds = tiny_setup()
    val = make_synthetic(3, 2, 8, seed=5)
    res = train(model, ds, TrainConfig(epochs=2, batch_size=4), val, run_dir=tmp_path)
    rows = list(csv.DictReader((tmp_path / "log.csv").open()))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 2
    assert res.checkpoint.exists()
    assert all(not math.isnan(float(r["val_loss"])) for r in rows)


def test_zero_epochs_header_only(tmp_path):
    model, ds = tiny_setup()
    res = train(model, ds, TrainConfig(epochs=0), run_dir=tmp_path)
    assert (tmp_path / "log.csv").read_text().strip() == ",".join(LOG_COLUMNS)
    assert res.rows == [] and res.steps == 0


def test_max_steps_caps(tmp_path):
    model, ds = tiny_setup()
    res = train(model, ds, TrainConfig(epochs=50, batch_size=4, max_steps=5))
    assert res.steps == 5


def test_evaluate_matches_per_sample_loop():
    model, ds = tiny_setup(seed=2)
    cm = evaluate(model, ds)
    assert cm.total == len(ds)
    assert cm.counts.sum(axis=1).tolist() == ds.class_counts().tolist()
    want = np.zeros((3, 3), int)
    model.eval()
    for img, y in zip(ds.images, ds.labels):
        want[y, int(model(Tensor(img[None].astype(np.float64))).data.argmax())] += 1
    assert np.array_equal(cm.counts, want)


def test_evaluate_single_sample():
    model, ds = tiny_setup()
    one = ds.subset([0])
    pred = int(predict_logits(model, one.images).argmax())
    one.labels[:] = pred
    cm = evaluate(model, one)
    assert cm.total == 1 and cm.counts[pred, pred] == 1


def test_evaluate_class_mismatch():
    model, _ = tiny_setup()
    with pytest.raises(ContractError):
        evaluate(model, make_synthetic(4, 1, 8))
