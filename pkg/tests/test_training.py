"""Window splitting, the optimizer, the lr schedule, and the training loop."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from odforecast import autodiff as ad
from odforecast import training as tr
from odforecast.data import Assignment, DataError, NumericalError, ODTensor, POIMatrix
from odforecast.model import ForecastModel, ModelConfig


# ---------------------------------------------------------------------------
# windows

def staircase_od(n=3, t=11):
    data = np.broadcast_to(np.arange(t, dtype=float), (n, n, t)).copy()
    return ODTensor(data)


def test_make_windows_counts_and_split():
    ds = tr.make_windows(staircase_od(t=11), history=2, horizon=1)
    # 9 windows at anchors 1..9, split 4 / 2 / 3
    assert ds.n_windows == 9
    assert ds.train_idx.tolist() == [1, 2, 3, 4]
    assert ds.val_idx.tolist() == [5, 6]
    assert ds.test_idx.tolist() == [7, 8, 9]


def test_window_alignment():
    ds = tr.make_windows(staircase_od(t=12), history=3, horizon=2)
    t = int(ds.train_idx[0])
    assert ds.hist(t)[0, 0].tolist() == [t - 2, t - 1, t]
    assert ds.future(t)[0, 0].tolist() == [t + 1, t + 2]
    hists, futs = ds.batch(ds.train_idx[:2])
    assert hists.shape == (2, 3, 3, 3)
    assert futs.shape == (2, 3, 3, 2)


def test_make_windows_validation():
    od = staircase_od(t=11)
    with pytest.raises(DataError):
        tr.make_windows(od, history=0, horizon=1)
    with pytest.raises(DataError):
        tr.make_windows(staircase_od(t=3), history=3, horizon=1)
    with pytest.raises(DataError):
        tr.make_windows(od, 2, 1, split=(0.5, 0.2, 0.2))
    with pytest.raises(DataError):
        tr.make_windows(od, 2, 1, split=(1.2, -0.1, -0.1))


def test_train_tensor_covers_training_windows_only():
    ds = tr.make_windows(staircase_od(t=11), history=2, horizon=1)
    sub = ds.train_tensor()
    # last training anchor is 4, its future slot is 5, so slots 0..5 survive
    assert sub.n_slots == 6


# ---------------------------------------------------------------------------
# optimizer and schedule

def test_adam_first_step_is_signed_lr():
    # from zero state the first update is lr * g / (|g| + eps), nearly sign(g)
    p, m, v = np.zeros(2), np.zeros(2), np.zeros(2)
    g = np.array([0.3, -2.0])
    p2, m2, v2 = tr.adam_step(p, g, m, v, t=1, lr=0.01)
    assert_allclose(p2, [-0.01, 0.01], rtol=1e-6)
    assert_allclose(m2, 0.1 * g, rtol=1e-12)
    assert_allclose(v2, 0.001 * g * g, rtol=1e-12)


def test_adam_class_matches_functional_steps():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(4)]
    tensor = ad.Tensor(values.copy(), requires_grad=True)
    opt = tr.Adam({"w": tensor})
    p, m, v = values.copy(), np.zeros_like(values), np.zeros_like(values)
    for step, g in enumerate(grads, start=1):
        tensor.grad = g.copy()
        opt.step(lr=0.05)
        p, m, v = tr.adam_step(p, g, m, v, step, 0.05)
        assert_allclose(tensor.values, p, rtol=1e-12)


def test_lr_schedule():
    assert tr.lr_at(1) == 0.004
    assert tr.lr_at(50) == 0.004
    assert tr.lr_at(51) == 0.002
    assert tr.lr_at(100) == 0.002
    assert tr.lr_at(101) == 0.001
    assert tr.lr_at(3, lr0=1.0, halve_every=1) == 0.25
    with pytest.raises(DataError):
        tr.lr_at(0)


def test_clip_gradients():
    a = ad.Tensor(np.zeros(3), requires_grad=True)
    b = ad.Tensor(np.zeros(4), requires_grad=True)
    a.grad = np.full(3, 3.0)
    b.grad = np.full(4, 4.0)
    norm = math.sqrt(27.0 + 64.0)
    got = tr.clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert_allclose(got, norm, rtol=1e-12)
    clipped = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
    assert_allclose(clipped, 1.0, rtol=1e-12)
    # already below the cap: untouched
    a.grad = np.array([0.1, 0.0, 0.0])
    b.grad = np.zeros(4)
    tr.clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert a.grad[0] == 0.1


# ---------------------------------------------------------------------------
# the loop

def tiny_setup(seed=0, t=40, horizon=1):
    cfg = ModelConfig(n_cells=6, n_supercells=2, history=3, horizon=horizon,
                      d=8, heads=2, n_queries=4, poi_dim=3)
    labels = np.array([0, 0, 0, 1, 1, 1])
    y = np.zeros((6, 2))
    y[np.arange(6), labels] = 1.0
    rng = np.random.default_rng(seed)
    poi = POIMatrix((rng.random((2, 3)) < 0.5).astype(float))
    model = ForecastModel(cfg, Assignment(y), poi, seed=seed)
    od = ODTensor(rng.poisson(1.2, size=(6, 6, t)).astype(float))
    ds = tr.make_windows(od, cfg.history, cfg.horizon)
    return model, ds


def test_train_smoke_and_history_rows():
    model, ds = tiny_setup()
    cfg = tr.TrainConfig(max_epochs=3, batch_size=8, patience=10, seed=1)
    res = tr.train(model, ds, cfg)
    assert res.n_epochs == 3
    assert not res.stopped_early
    assert [r["epoch"] for r in res.history] == [1, 2, 3]
    for r in res.history:
        assert set(r) == {"epoch", "train_nll", "val_nll", "val_wmape", "lr"}
        assert math.isfinite(r["train_nll"])
        assert r["lr"] == 0.004
    assert 1 <= res.best_epoch <= 3
    # parameters were restored to the best epoch's snapshot
    val_nll, _ = tr.evaluate_split(model, ds, ds.val_idx)
    assert_allclose(val_nll, res.best_val_nll, rtol=1e-12)


def test_training_reduces_nll():
    model, ds = tiny_setup(seed=3, t=60)
    before, _ = tr.evaluate_split(model, ds, ds.train_idx)
    tr.train(model, ds, tr.TrainConfig(max_epochs=10, batch_size=16,
                                       patience=20, seed=3))
    after, _ = tr.evaluate_split(model, ds, ds.train_idx)
    assert after < before


def test_early_stopping_on_divergent_lr():
    model, ds = tiny_setup(seed=4)
    cfg = tr.TrainConfig(lr0=1.0, max_epochs=60, patience=3, seed=4)
    res = tr.train(model, ds, cfg)
    assert res.stopped_early
    assert res.n_epochs < 60
    assert res.n_epochs >= res.best_epoch + 3


def test_monitor_validation_and_wmape_mode():
    model, ds = tiny_setup(seed=5)
    with pytest.raises(DataError):
        tr.train(model, ds, tr.TrainConfig(monitor="test_nll"))
    res = tr.train(model, ds, tr.TrainConfig(max_epochs=2, patience=5, seed=5,
                                             monitor="val_wmape"))
    wmapes = [r["val_wmape"] for r in res.history]
    assert res.best_epoch == int(np.argmin(wmapes)) + 1


def test_window_size_mismatch_is_rejected():
    model, _ = tiny_setup()
    od = ODTensor(np.zeros((6, 6, 20)))
    wrong = tr.make_windows(od, history=4, horizon=1)
    with pytest.raises(DataError):
        tr.train(model, wrong, tr.TrainConfig(max_epochs=1))


def test_empty_validation_falls_back_to_train_loss():
    model, _ = tiny_setup(seed=6)
    od = ODTensor(np.random.default_rng(6).poisson(
        1.0, size=(6, 6, 30)).astype(float))
    ds = tr.make_windows(od, 3, 1, split=(1.0, 0.0, 0.0))
    res = tr.train(model, ds, tr.TrainConfig(max_epochs=2, patience=5, seed=6))
    assert res.n_epochs == 2
    assert math.isnan(res.best_val_nll)
    assert res.best_epoch > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_parameters_raise_numerical_error():
    # layer norm rescales even absurdly large activations, so the only way
    # to non-finite territory is through the parameters themselves
    model, ds = tiny_setup(seed=7)
    model.params["embed.w_o"].values[:] = np.nan
    with pytest.raises(NumericalError, match="epoch 1"):
        tr.train(model, ds, tr.TrainConfig(max_epochs=1, seed=7))


def test_history_csv_round_trip(tmp_path):
    rows = [{"epoch": 1, "train_nll": 1.25, "val_nll": float("nan"),
             "val_wmape": 0.5, "lr": 0.004},
            {"epoch": 2, "train_nll": np.float64(1.0) / 3.0, "val_nll": 0.9,
             "val_wmape": 0.25, "lr": 0.002}]
    path = tmp_path / "history.csv"
    tr.write_history_csv(rows, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_nll,val_nll,val_wmape,lr"
    assert len(lines) == 3
    cells = lines[2].split(",")
    assert cells[0] == "2"
    # repr-formatted floats parse back bit-exactly
    assert float(cells[1]) == 1.0 / 3.0
    assert math.isnan(float(lines[1].split(",")[2]))


def test_training_is_deterministic(tmp_path):
    outputs = []
    for run in range(2):
        model, ds = tiny_setup(seed=8)
        path = tmp_path / f"h{run}.csv"
        tr.train(model, ds, tr.TrainConfig(max_epochs=3, patience=10, seed=8),
                 history_path=path)
        state = np.concatenate([model.params[k].values.ravel()
                                for k in sorted(model.params)])
        outputs.append((path.read_bytes(), state))
    assert outputs[0][0] == outputs[1][0]
    assert np.array_equal(outputs[0][1], outputs[1][1])
