import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from loraprun import numcore as nc
from loraprun.optim import AdamWConfig, OptimState, accumulate_and_step, adamw_step, lr_at


def param(values, grad=None, requires_grad=True):
    with nc.precision(np.float64):
        t = nc.Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad)
    t.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return t


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_single_step_magnitude_is_lr():
    p = param([1.0, -2.0], grad=[0.3, -5.0])
    adamw_step(OptimState(), [p], AdamWConfig(lr=0.1, warmup_steps=0))
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-8)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8),
       st.floats(0.0, 0.1), st.floats(0.5, 0.99))
def test_matches_scalar_reference(grads, wd, b1):
    cfg = AdamWConfig(lr=0.01, beta1=b1, weight_decay=wd, warmup_steps=0)
    p = param([0.5])
    state = OptimState()
    for g in grads:
        p.grad = np.array([g])
        adamw_step(state, [p], cfg)
    expect = reference_adamw(0.5, grads, 0.01, b1, 0.999, 1e-8, wd)
    assert p.data[0] == pytest.approx(expect, rel=1e-9, abs=1e-12)
    assert state.step == len(grads)


def test_weight_decay_is_decoupled():
    p = param([2.0], grad=[0.0])
    adamw_step(OptimState(), [p], AdamWConfig(lr=0.1, weight_decay=0.5, warmup_steps=0))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_warmup_schedule():
    cfg = AdamWConfig(lr=1.0, warmup_steps=4)
    assert [lr_at(s, cfg) for s in range(7)] == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
    assert lr_at(0, AdamWConfig(lr=0.3, warmup_steps=0)) == 0.3
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_frozen_parameters_skipped():
    frozen = param([1.0], requires_grad=False)
    live = param([1.0], grad=[1.0])
    state = adamw_step(OptimState(), [frozen, live], AdamWConfig(lr=0.1, warmup_steps=0))
    assert frozen.data[0] == 1.0 and live.data[0] != 1.0
    assert set(state.exp_avg) == {1}


def test_missing_and_nonfinite_gradients():
    with pytest.raises(ValueError):
        adamw_step(OptimState(), [param([1.0])], AdamWConfig())
    state = OptimState()
    p = param([1.0], grad=[np.inf])
    with pytest.raises(nc.NonFiniteError):
        adamw_step(state, [p], AdamWConfig())
    assert state.step == 0 and p.data[0] == 1.0


@pytest.mark.parametrize("bad", [dict(beta1=1.0), dict(eps=0), dict(lr=-1), dict(accumulation=0),
                                 dict(warmup_steps=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AdamWConfig(**bad)


def _quadratic(p):
    return lambda target: nc.mean(nc.mul(nc.sub(p, nc.Tensor(target)), nc.sub(p, nc.Tensor(target))))


def test_accumulation_equals_large_batch(rng):
    targets = [rng.normal(size=3) for _ in range(4)]
    with nc.precision(np.float64):
        a, b = param(np.zeros(3)), param(np.zeros(3))
        cfg4 = AdamWConfig(lr=0.1, warmup_steps=0, accumulation=4)
        cfg1 = AdamWConfig(lr=0.1, warmup_steps=0)
        _, loss_a = accumulate_and_step([a], targets, _quadratic(a), OptimState(), cfg4)
        big = np.stack(targets)
        tiled = lambda: nc.matmul(nc.Tensor(np.ones((4, 1))), nc.reshape(b, (1, 3)))
        big_loss = lambda t: nc.mean(nc.mul(nc.sub(tiled(), nc.Tensor(t)), nc.sub(tiled(), nc.Tensor(t))))
        _, loss_b = accumulate_and_step([b], [big], big_loss, OptimState(), cfg1)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12)
    assert loss_a == pytest.approx(loss_b)


def test_accumulation_errors():
    p = param([0.0])
    cfg = AdamWConfig(accumulation=2)
    with pytest.raises(ValueError):
        accumulate_and_step([p], [np.ones(1)], _quadratic(p), OptimState(), cfg)
    with pytest.raises(ValueError):
        accumulate_and_step([p], [np.ones(1), np.array([])], _quadratic(p), OptimState(), cfg)
    with pytest.raises(nc.NonFiniteError):
        accumulate_and_step([p], [np.ones(1), np.array([np.nan])], _quadratic(p), OptimState(), cfg)


def test_converges_on_quadratic():
    p = param(np.zeros(2))
    state = OptimState()
    cfg = AdamWConfig(lr=0.05, warmup_steps=10)
    for _ in range(400):
        accumulate_and_step([p], [np.array([1.0, -3.0])], _quadratic(p), state, cfg)
    np.testing.assert_allclose(p.data, [1.0, -3.0], atol=1e-2)
