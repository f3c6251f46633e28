import numpy as np
import pytest

from cbsa import tensor as T
from cbsa.optim import AdamW, OneCycle, one_cycle_lr


def test_one_cycle_landmarks():
    total = 100
    assert one_cycle_lr(0, total) == pytest.approx(4e-5, rel=1e-12)
    assert one_cycle_lr(30, total) == pytest.approx(1e-3, rel=1e-12)
    assert one_cycle_lr(total - 1, total) == pytest.approx(1e-7, rel=1e-9)


def test_one_cycle_shape():
    lrs = [one_cycle_lr(s, 200) for s in range(200)]
    peak = int(np.argmax(lrs))
    assert peak == 60
    assert all(a < b for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))


def test_one_cycle_range():
    with pytest.raises(ValueError):
        one_cycle_lr(10, 10)
    with pytest.raises(ValueError):
        one_cycle_lr(-1, 10)
    assert one_cycle_lr(0, 3, OneCycle(pct_warm=0.1)) == 1e-3


def test_zero_gradient_step_leaves_params(rng):
    p = T.parameter(rng.normal(size=(3, 2)))
    before = p.data.copy()
    opt = AdamW([p], weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    opt.step(1e-3)
    np.testing.assert_array_equal(p.data, before)


def test_first_step_moves_by_lr(rng):
    p = T.parameter(np.zeros(4))
    opt = AdamW([p], weight_decay=0.0)
    p.grad = np.array([1.0, -2.0, 0.5, -0.1])
    opt.step(0.01)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(p.grad), rtol=1e-6)


def test_adamw_minimizes_quadratic(rng):
    target = rng.normal(size=5)
    p = T.parameter(np.zeros(5))
    opt = AdamW([p], weight_decay=0.0)
    for _ in range(2000):
        opt.zero_grad()
        with T.Tape() as tape:
            T.backward(tape, T.tsum((p - T.tensor(target)) * (p - T.tensor(target))))
        opt.step(0.05)
    np.testing.assert_allclose(p.data, target, atol=1e-3)
