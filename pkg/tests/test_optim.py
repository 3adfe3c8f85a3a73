"""Optimizer and schedule tests with hand-computed step oracles."""

import numpy as np
import pytest

from moeloc.autodiff import Tensor, parameter
from moeloc.optim import AdamW, OneCycleSchedule, linear_anneal


def test_single_step_matches_hand_computation():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))
    p = parameter(p0.copy())
    p.grad = g.copy()
    opt = AdamW([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    opt.step()
    # After one step the bias-corrected moments are exactly g and g*g.
    expected = p0 - 1e-3 * (g / (np.sqrt(g * g) + 1e-8))
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_two_steps_match_reference_loop():
    rng = np.random.default_rng(1)
    p0 = rng.normal(size=(5,))
    grads = [rng.normal(size=(5,)) for _ in range(2)]
    p = parameter(p0.copy())
    opt = AdamW([p], lr=2e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2)

    ref = p0.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        ref = ref - 2e-3 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 1e-2 * ref)
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-15)


def test_weight_decay_is_decoupled():
    # Zero gradient: the only motion is the decay term lr * wd * p.
    p = parameter(np.full(3, 2.0))
    p.grad = np.zeros(3)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(p.data, np.full(3, 2.0) * (1 - 0.1 * 0.5), atol=1e-15)


def test_none_grad_parameters_are_skipped():
    frozen = parameter(np.ones(4) * 3.0)
    live = parameter(np.ones(4))
    live.grad = np.ones(4)
    opt = AdamW([frozen, live], lr=0.1, weight_decay=0.5)
    opt.step()
    # Frozen param untouched, not even decayed.
    np.testing.assert_array_equal(frozen.data, np.ones(4) * 3.0)
    assert not np.allclose(live.data, np.ones(4))


def test_zero_grad_clears_gradients():
    p = parameter(np.ones(2))
    p.grad = np.ones(2)
    opt = AdamW([p])
    opt.zero_grad()
    assert p.grad is None


def test_optimizer_descends_quadratic():
    target = np.array([1.5, -2.0, 0.25])
    p = parameter(np.zeros(3))
    opt = AdamW([p], lr=5e-2, weight_decay=0.0)
    for _ in range(400):
        opt.zero_grad()
        loss = ((p - target) ** 2).sum()
        loss.backward()
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_schedule_endpoints_and_peak():
    sched = OneCycleSchedule(min_lr=2e-4, max_lr=2e-3, total_steps=101)
    assert sched.lr_at(0) == pytest.approx(2e-4)
    assert sched.lr_at(100) == pytest.approx(2e-4)
    assert sched.lr_at(50) == pytest.approx(2e-3)


def test_schedule_rises_then_falls():
    sched = OneCycleSchedule(min_lr=1e-4, max_lr=1e-2, total_steps=200)
    lrs = [sched.lr_at(s) for s in range(200)]
    peak = int(np.argmax(lrs))
    for a, b in zip(lrs[:peak], lrs[1 : peak + 1]):
        assert b >= a
    for a, b in zip(lrs[peak:-1], lrs[peak + 1 :]):
        assert b <= a


def test_schedule_clamps_past_the_end():
    sched = OneCycleSchedule(min_lr=1e-4, max_lr=1e-2, total_steps=10)
    assert sched.lr_at(500) == pytest.approx(1e-4)


def test_schedule_validates_inputs():
    with pytest.raises(ValueError):
        OneCycleSchedule(min_lr=1e-2, max_lr=1e-4, total_steps=10)
    with pytest.raises(ValueError):
        OneCycleSchedule(min_lr=0.0, max_lr=1e-4, total_steps=10)
    with pytest.raises(ValueError):
        OneCycleSchedule(min_lr=1e-4, max_lr=1e-2, total_steps=0)


def test_linear_anneal_endpoints():
    assert linear_anneal(50.0, 1.0, 0, 100) == pytest.approx(50.0)
    assert linear_anneal(50.0, 1.0, 99, 100) == pytest.approx(1.0)
    assert linear_anneal(50.0, 1.0, 0, 1) == pytest.approx(1.0)
    mid = linear_anneal(0.0, 10.0, 50, 101)
    assert mid == pytest.approx(5.0)
