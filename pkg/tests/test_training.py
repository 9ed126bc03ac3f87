import math

import numpy as np
import pytest

from stdemand import diffcore as dc
from stdemand.diffcore import DiffArray
from stdemand.model import DemandForecaster, ModelConfig
from stdemand.pipeline import prepare_dataset
from stdemand.synthetic import make_synthetic_demand
from stdemand.training import (
    AdamW, TrainConfig, TrainingError, adamw_update, clip_grad_norm, load_checkpoint, lr_schedule,
    masked_mae_loss, save_checkpoint, train,
)
from stdemand.model import ModelParameters


def leaf(x):
    return DiffArray(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- loss ---------------------------------------------------------------------------

def test_masked_loss_examples():
    assert masked_mae_loss(np.array([4.0, 9.0]), np.array([4.0, 9.0])).item() == 0.0
    assert masked_mae_loss(np.array([12.0, 0.0]), np.array([10.0, 3.0]), 5).item() == 2.0
    # all targets below the threshold: plain MAE
    assert masked_mae_loss(np.array([1.0, 5.0]), np.array([2.0, 3.0]), 5).item() == 1.5


def test_masked_cells_get_zero_gradient():
    pred = leaf([12.0, 0.0, 7.0])
    target = np.array([10.0, 3.0, 8.0])
    with dc.Tape():
        dc.backward(masked_mae_loss(pred, target, 5))
    assert pred.grad[1] == 0.0 and pred.grad[0] == 0.5 and pred.grad[2] == -0.5
    before = masked_mae_loss(pred.data, target, 5).item()
    target[1] = 1.0
    assert masked_mae_loss(pred.data, target, 5).item() == before


# -- optimizer ---------------------------------------------------------------------------

def test_adamw_first_step_hand_value():
    p, m, v = adamw_update(np.array([0.0]), np.array([1.0]), np.zeros(1), np.zeros(1), 1, 0.1, weight_decay=0.0)
    assert p[0] == pytest.approx(-0.0999999990, abs=1e-12)
    assert m[0] == pytest.approx(0.1) and v[0] == pytest.approx(0.001)


def test_adamw_zero_gradient_and_decay_only():
    p, _, _ = adamw_update(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 0.1, weight_decay=0.0)
    assert p[0] == 2.0
    p, _, _ = adamw_update(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 0.1, weight_decay=0.01)
    assert p[0] == 2.0 - 0.1 * 0.01 * 2.0


def test_adamw_three_steps_match_scalar_recurrence():
    grads = [0.3, -1.2, 0.7]
    lr, wd, b1, b2, eps = 0.05, 0.01, 0.9, 0.999, 1e-8
    # hand recurrence in plain floats
    x, m, v = 1.5, 0.0, 0.0
    expected = []
    for t, g in enumerate(grads, start=1):
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(x)
    params = ModelParameters()
    w = params.register("w", np.array([1.5]))
    opt = AdamW(params, (b1, b2), eps, wd)
    for g, want in zip(grads, expected):
        w.grad = np.array([g])
        opt.step(lr)
        assert abs(w.data[0] - want) < 1e-12


def test_adamw_rejects_non_finite_gradient():
    params = ModelParameters()
    w = params.register("layer0.weight", np.ones(2))
    w.grad = np.array([1.0, np.inf])
    with pytest.raises(TrainingError, match="layer0.weight"):
        AdamW(params).step(1e-3)


def test_clip_grad_norm():
    params = ModelParameters()
    a = params.register("a", np.zeros(2))
    b = params.register("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm(params, 1.0) == 5.0
    assert dc.parameters_grad_norm(params.values()) == pytest.approx(1.0)
    a.grad = np.array([0.3, 0.0])
    b.grad = np.array([0.4])
    clip_grad_norm(params, 5.0)
    assert a.grad[0] == 0.3


def test_lr_schedule():
    assert lr_schedule(0, 101) == 1e-3
    assert lr_schedule(100, 101) == pytest.approx(1e-4, abs=1e-18)
    assert lr_schedule(50, 101) == pytest.approx(5.5e-4, abs=1e-15)
    lrs = [lr_schedule(e, 20) for e in range(20)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(20, 20)


# -- training loop ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def short_data():
    tensor, _ = make_synthetic_demand(weeks=200 * 1800 / (7 * 86400), seed=3)
    assert len(tensor) == 200
    return prepare_dataset(tensor, 6, 1)


def small_model(data, seed=0, **kw):
    cfg = ModelConfig(**{"d_model": 16, "n_layers": 1, **kw})
    return DemandForecaster(cfg, data.train.inputs.shape[2], seed=seed)


def test_training_loss_decreases_under_default_config(short_data):
    model = DemandForecaster(ModelConfig(), 12, seed=0)
    result = train(model, short_data, TrainConfig(epochs=5, seed=0))
    losses = [h["train_loss"] for h in result.history]
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_same_seed_same_first_epoch(short_data, tmp_path):
    runs = []
    for k in range(2):
        model = small_model(short_data)
        res = train(model, short_data, TrainConfig(epochs=1, seed=4), history_path=tmp_path / f"h{k}.jsonl")
        runs.append(res.history[0]["train_loss"])
    assert abs(runs[0] - runs[1]) <= 1e-10
    assert (tmp_path / "h0.jsonl").read_text() == (tmp_path / "h1.jsonl").read_text()


def test_patience_zero_stops_after_first_bad_epoch(short_data):
    model = small_model(short_data)
    result = train(model, short_data, TrainConfig(epochs=40, patience=0, lr_start=0.05, lr_end=0.05))
    vals = [h["val_mae"] for h in result.history]
    assert result.stopped_early and len(vals) < 40
    # every epoch but the last improved; the last did not
    assert all(a > b for a, b in zip(vals[:-1], vals[1:-1]))
    assert vals[-1] >= min(vals[:-1])
    assert result.best_val_mae == min(vals)


def test_checkpoint_roundtrip_is_bit_identical(short_data, tmp_path):
    model = small_model(short_data, seed=2)
    path = tmp_path / "ckpt.adf"
    result = train(model, short_data, TrainConfig(epochs=2), checkpoint_path=path)
    loaded, norm, header = load_checkpoint(path)
    assert header["epoch"] == result.best_epoch
    np.testing.assert_array_equal(norm.mean, short_data.normalizer.mean)
    batch = short_data.test
    assert np.array_equal(loaded.predict(batch.inputs, batch.input_time),
                          model.predict(batch.inputs, batch.input_time))
    save_checkpoint(tmp_path / "again.adf", loaded, norm, None, {"train_config": header["train_config"],
                                                                  "epoch": header["epoch"]})
    assert (tmp_path / "again.adf").read_bytes() == path.read_bytes()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-4, lr_end=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    assert TrainConfig().to_dict()["betas"] == [0.9, 0.999]
