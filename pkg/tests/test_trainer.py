import math

import numpy as np
import pytest

from advwb import ops
from advwb.data_io import Dataset
from advwb.errors import ShapeError, TrainingDiverged
from advwb.model import ModelConfig, build_model
from advwb.tensor import Tensor, backward
from advwb.trainer import (
    AdamState,
    EarlyStopState,
    TrainConfig,
    adam_step,
    compute_class_weights,
    early_stop_update,
    split_train_val,
    train,
)


class TestClassWeights:
    def test_balanced(self):
        np.testing.assert_allclose(compute_class_weights([0, 1, 0, 1], 2), [1.0, 1.0])

    def test_seventy_five_twenty_five(self):
        np.testing.assert_allclose(compute_class_weights([0] * 75 + [1] * 25, 2), [0.5, 1.5], rtol=1e-6)

    def test_three_singletons(self):
        np.testing.assert_allclose(compute_class_weights([0, 1, 2], 3), [1, 1, 1])

    def test_mean_is_one(self, rng):
        labels = rng.integers(0, 5, 300)
        assert abs(compute_class_weights(labels, 5).mean() - 1) < 1e-6

    def test_empty_class_named(self):
        with pytest.raises(ValueError, match="class 2"):
            compute_class_weights([0, 1, 1], 3)


def reference_adam(p, grads, lr=0.01, b1=0.9, b2=0.999, eps=0.1):
    """Independent textbook Adam in python floats."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


class TestAdam:
    def test_single_step_value(self):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), TrainConfig())
        assert abs(p["w"][0] - (-0.01 / 1.1)) < 1e-12
        assert abs(p["w"][0] - (-0.0090909)) < 1e-7

    def test_zero_grad_is_identity(self, rng):
        w = rng.standard_normal((3, 2))
        p = {"w": w.copy()}
        state = AdamState()
        for _ in range(3):
            adam_step(p, {"w": np.zeros_like(w)}, state, TrainConfig())
        assert np.array_equal(p["w"], w) and state.t == 3

    def test_quadratic_two_steps_match_reference(self):
        # f(p) = (p - 3)^2, g = 2 (p - 3)
        p = {"w": np.array([1.0])}
        state = AdamState()
        grads = []
        for _ in range(2):
            g = 2 * (p["w"] - 3.0)
            grads.append(float(g[0]))
            adam_step(p, {"w": g}, state, TrainConfig())
        assert abs(p["w"][0] - reference_adam(1.0, grads)) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), TrainConfig())

    def test_state_mirrors_params(self):
        p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
        state = AdamState()
        adam_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, state, TrainConfig())
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


class TestEarlyStopping:
    def test_below_min_delta_is_not_improvement(self):
        s = EarlyStopState(best_metric=0.80, best_seen=0.80)
        early_stop_update(s, 0.8005)
        assert s.epochs_since_improvement == 1 and s.best_metric == 0.80

    def test_exactly_min_delta_is_not_improvement(self):
        s = EarlyStopState(min_delta=0.25, best_metric=0.5, best_seen=0.5)
        early_stop_update(s, 0.75)
        assert s.epochs_since_improvement == 1

    def test_improvement_resets(self):
        s = EarlyStopState(best_metric=0.80, epochs_since_improvement=7, best_seen=0.80)
        assert early_stop_update(s, 0.802, weights={"w": np.ones(1)}) == "continue"
        assert s.epochs_since_improvement == 0 and s.best_metric == 0.802
        assert s.best_weights["w"][0] == 1

    def test_forty_non_improvements_stop(self):
        s = EarlyStopState()
        decisions = [early_stop_update(s, 0.5, epoch=e) for e in range(1, 42)]
        # epoch 1 improves on -inf; epochs 2..41 are the 40 non-improvements
        assert decisions[:-1] == ["continue"] * 40 and decisions[-1] == "stop"
        assert s.epochs_since_improvement == 40

    def test_flat_sequence_stops_at_epoch_41_check(self):
        s = EarlyStopState(patience=40)
        for epoch in range(1, 100):
            if early_stop_update(s, 0.7, epoch=epoch) == "stop":
                break
        assert epoch == 41

    def test_counter_never_exceeds_patience(self, rng):
        s = EarlyStopState(patience=5)
        for m in rng.random(200):
            d = early_stop_update(s, float(m))
            assert s.epochs_since_improvement <= s.patience
            if d == "stop":
                break

    def test_snapshot_follows_max(self):
        s = EarlyStopState(min_delta=0.01)
        for epoch, m in enumerate([0.5, 0.505, 0.503], start=1):
            early_stop_update(s, m, weights={"w": np.array([m])}, epoch=epoch)
        # 0.505 did not count as improvement for patience but is the best weights
        assert s.epochs_since_improvement == 2 and s.best_weights["w"][0] == 0.505 and s.best_epoch == 2

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            early_stop_update(EarlyStopState(), float("nan"))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(epoch_subsample_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epoch_subsample_fraction=1.5)


def test_split_is_seeded_and_disjoint():
    a, b = split_train_val(100, 0.2, 3)
    assert len(b) == 20 and not set(a) & set(b) and len(set(a) | set(b)) == 100
    a2, b2 = split_train_val(100, 0.2, 3)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)


def micro_config(**kw):
    return ModelConfig(input_shape=(1, 8, 8), stage_channels=(4, 4, 4), blocks_per_stage=1, **kw)


def separable_set(n=96, seed=0):
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.clip(r.normal(0.3, 0.05, (n, 1, 8, 8)), 0, 1).astype(np.float32)
    x[y == 1, :, 2:6, 2:6] += 0.5
    return Dataset(np.clip(x, 0, 1), y.astype(np.int64))


def test_separable_toy_reaches_99_percent():
    data = separable_set()
    model, history = train(build_model(micro_config(), seed=0), data, TrainConfig(max_epochs=20, batch_size=16),
                           val_dataset=data)
    assert max(r["train_acc"] for r in history.rows) >= 0.99


def test_same_seed_bitwise_identical_weights():
    data = separable_set()
    cfg = TrainConfig(max_epochs=3, batch_size=16, seed=4)
    a, _ = train(build_model(micro_config(head_kind="baseline"), seed=1), data, cfg)
    b, _ = train(build_model(micro_config(head_kind="baseline"), seed=1), data, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_restore_best_matches_max_validation():
    data = separable_set()
    model, history = train(build_model(micro_config(), seed=2), data, TrainConfig(max_epochs=6, batch_size=16))
    from advwb.trainer import accuracy

    va = split_train_val(len(data), 0.2, 0)[1]
    best = max(r["val_acc"] for r in history.rows)
    assert history.best_val_acc == best
    assert accuracy(model, data.images[va], data.labels[va]) == best


def test_patience_stops_training():
    data = separable_set()
    _, history = train(build_model(micro_config(), seed=0), data,
                       TrainConfig(max_epochs=50, patience=2, min_delta=0.5, batch_size=32))
    assert history.stopped_early and len(history.rows) == 3


def test_subsample_fraction_limits_steps(monkeypatch):
    import advwb.trainer as tr

    calls = []
    real = tr.adam_step
    monkeypatch.setattr(tr, "adam_step", lambda *a: calls.append(1) or real(*a))
    train(build_model(micro_config(), seed=0), separable_set(96), TrainConfig(max_epochs=1, batch_size=8,
                                                                              epoch_subsample_fraction=0.25))
    assert len(calls) == math.ceil(int(96 * 0.8) * 0.25 / 8)


def test_small_lr_loss_monotone_on_fixed_batch():
    data = separable_set(16)
    model = build_model(micro_config(dropout_p=0.0), seed=0, dtype=np.float64)
    state, cfg = AdamState(), TrainConfig(learning_rate=1e-4)
    losses = []
    for _ in range(6):
        for p in model.params.values():
            p.grad = None
        loss, _ = ops.softmax_cross_entropy(model.forward(Tensor(data.images.astype(np.float64))), data.labels)
        losses.append(float(loss.data))
        backward(loss)
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, cfg)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    data = separable_set()
    model = build_model(micro_config(), seed=0)
    model.params["head.dense.weight"].data[:] = np.inf
    with pytest.raises(TrainingDiverged):
        train(model, data, TrainConfig(max_epochs=1))


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(build_model(micro_config(), seed=0), Dataset(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64)),
              TrainConfig())


def test_history_csv(tmp_path):
    _, history = train(build_model(micro_config(), seed=0), separable_set(), TrainConfig(max_epochs=2))
    history.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_acc" and len(lines) == 3
