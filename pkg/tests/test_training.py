import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccfnet.network import EncoderConfig, MSCConfig, build_network
from ccfnet.synth import SynthConfig, generate_dataset
from ccfnet.training import (
    AdamWState,
    LrSchedule,
    NumericError,
    TrainConfig,
    adamw_step,
    load_state_dict,
    lr_at,
    state_dict,
    stack_batch,
    train,
    train_step,
)


class TestAdamW:
    def test_first_step_oracle(self):
        w = np.array([1.0])
        adamw_step({"w": w}, {"w": np.array([0.1])}, AdamWState(), 3e-4)
        assert w[0] == pytest.approx(0.99969985, abs=1e-9)

    def test_zero_gradient_is_pure_decay(self):
        w = np.array([2.0, -0.5])
        expected = w * (1 - 3e-4 * 5e-4)
        adamw_step({"w": w}, {"w": np.zeros(2)}, AdamWState(), 3e-4)
        np.testing.assert_array_equal(w, expected)

    def test_zero_gradient_zero_decay_is_identity(self):
        w = np.array([2.0, -0.5])
        adamw_step({"w": w}, {"w": np.zeros(2)}, AdamWState(weight_decay=0.0), 3e-4)
        np.testing.assert_array_equal(w, [2.0, -0.5])

    def test_three_step_adam_trace(self):
        # plain-float Adam, written out independently
        grads = [(0.3, -1.2), (-0.1, 0.4), (0.25, 0.0)]
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        ref = [0.5, -1.5]
        m, v = [0.0, 0.0], [0.0, 0.0]
        for t, g in enumerate(grads, start=1):
            for i in range(2):
                m[i] = b1 * m[i] + (1 - b1) * g[i]
                v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
                ref[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
        w = np.array([0.5, -1.5])
        state = AdamWState(weight_decay=0.0)
        for g in grads:
            adamw_step({"w": w}, {"w": np.array(g)}, state, lr)
        np.testing.assert_allclose(w, ref, rtol=0, atol=1e-12)
        assert state.t == 3 and np.all(state.v["w"] >= 0)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            adamw_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, AdamWState(), 1e-3)


class TestSchedule:
    s = LrSchedule()

    def test_oracles(self):
        assert lr_at(self.s, 0, 3e-4) == pytest.approx(3e-4, abs=1e-12)
        assert lr_at(self.s, 5, 3e-4) == pytest.approx(1.5e-4, abs=1e-12)
        assert lr_at(self.s, 10, 3e-4) == pytest.approx(3e-4, abs=1e-12)
        assert lr_at(self.s, 30, 3e-4) == pytest.approx(3e-4, abs=1e-12)
        assert lr_at(self.s, 20, 3e-4) == pytest.approx(1.5e-4, abs=1e-12)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at(self.s, -1, 3e-4)

    def test_bounds_over_many_steps(self):
        lrs = np.array([lr_at(self.s, t, 3e-4) for t in range(100_000)])
        assert lrs.max() <= 3e-4 and lrs.min() >= 0.0

    @settings(max_examples=100, deadline=None)
    @given(
        T_0=st.integers(1, 50),
        T_mult=st.integers(1, 4),
        eta_min=st.floats(0, 1e-4),
        base=st.floats(1e-4, 1e-2),
        step=st.integers(0, 10**6),
    )
    def test_bounds_property(self, T_0, T_mult, eta_min, base, step):
        lr = lr_at(LrSchedule(T_0, T_mult, eta_min), step, base)
        assert eta_min - 1e-15 <= lr <= base + 1e-15


# ---------------------------------------------------------------------------
# training loop on a small network
# ---------------------------------------------------------------------------

TINY = EncoderConfig(
    stem_channels=4,
    stage_channels=(8, 8, 16),
    blocks_per_stage=1,
    msc=MSCConfig(fuse_channels=16, bottleneck_reduction=4),
)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SynthConfig(), 12)


def tiny_cfg(**kw):
    base = dict(epochs=3, batch_size=4, encoder=TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_leaves_parameters_unchanged(data):
    net = build_network(TINY, seed=1)
    before = state_dict(net)
    images, targets = stack_batch(data[:4], tiny_cfg().grid)
    opt = AdamWState()
    for _ in range(2):
        train_step(net, opt, images, targets, tiny_cfg().weights, 0.0)
    after = state_dict(net)
    for name, p in net.named_parameters():
        np.testing.assert_array_equal(after[name], before[name])


def test_gradients_reset_each_step(data):
    net = build_network(TINY, seed=1)
    images, targets = stack_batch(data[:4], tiny_cfg().grid)
    opt = AdamWState()
    train_step(net, opt, images, targets, tiny_cfg().weights, 0.0)
    first = {k: p.grad.copy() for k, p in net.named_parameters()}
    train_step(net, opt, images, targets, tiny_cfg().weights, 0.0)
    # train-mode BN uses batch statistics, so identical batches give identical gradients
    for k, p in net.named_parameters():
        np.testing.assert_allclose(p.grad, first[k], rtol=1e-6, atol=1e-9)


def test_history_is_deterministic(data, tmp_path):
    fold = (np.arange(8), np.arange(8, 12))
    a = train(tiny_cfg(), data, fold, run_dir=tmp_path / "a")
    b = train(tiny_cfg(), data, fold, run_dir=tmp_path / "b")
    assert json.dumps(a.history) == json.dumps(b.history)
    assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()
    assert len(a.history) == 3 and "val" in a.history[-1]
    assert [r["lr"] for r in a.history] == [lr_at(LrSchedule(), e, 3e-4) for e in range(3)]


def test_loss_decreases(data):
    cfg = tiny_cfg(epochs=6, augment=None, batch_size=2)
    res = train(cfg, data, (np.arange(12), np.array([], int)))
    losses = [r["loss"]["total"] for r in res.history]
    assert losses[-1] < losses[0]
    assert res.best_epoch == 5  # no validation split: the final state is kept


def test_best_state_is_loadable(data):
    res = train(tiny_cfg(epochs=2), data, (np.arange(8), np.arange(8, 12)))
    net = build_network(TINY, seed=99)
    load_state_dict(net, res.best_state)
    for k, v in state_dict(net).items():
        np.testing.assert_array_equal(v, res.best_state[k])
    with pytest.raises(KeyError):
        load_state_dict(net, {})


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=1), dict(encoder=EncoderConfig(stride=8, stage_strides=(2, 2, 1)))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny_cfg(**kw).validate()


def test_empty_training_split(data):
    with pytest.raises(ValueError):
        train(tiny_cfg(), data, (np.array([], int), np.arange(4)))
