import numpy as np
import pytest

from fcan import tensor as tn
from fcan.optim import RMSProp, every_n, step_lr


def test_zero_gradient_leaves_params_and_decays_accumulator():
    p = tn.parameter(np.array([1.0, -2.0]))
    opt = RMSProp([p], lr=0.1)
    opt.acc[0][:] = 4.0
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]
    np.testing.assert_allclose(opt.acc[0], 0.99 * 4.0)
    assert opt.steps == 1
    assert p.grad is None


def test_single_update_by_hand():
    p = tn.parameter(np.array([0.5]))
    opt = RMSProp([p], lr=0.01, decay=0.9, eps=1e-8)
    p.grad = np.array([2.0])
    opt.step()
    acc = 0.1 * 4.0
    assert opt.acc[0][0] == pytest.approx(acc)
    assert p.data[0] == pytest.approx(0.5 - 0.01 * 2.0 / (np.sqrt(acc) + 1e-8))


@pytest.mark.parametrize("g", [3.0, -0.25])
def test_constant_gradient_step_approaches_lr_sign(g):
    # the accumulator converges to g**2, so the step tends to lr * g / (|g| + eps)
    p = tn.parameter(np.array([0.0]))
    opt = RMSProp([p], lr=0.01)
    for _ in range(3000):
        before = p.data[0]
        p.grad = np.array([g])
        opt.step()
    step = before - p.data[0]
    assert step == pytest.approx(0.01 * g / (abs(g) + 1e-8), rel=1e-6)
    assert opt.acc[0][0] == pytest.approx(g * g, rel=1e-6)


def test_accumulators_stay_non_negative(rng):
    p = tn.parameter(rng.normal(50))
    opt = RMSProp([p])
    for _ in range(20):
        p.grad = rng.normal(50, 10.0)
        opt.step()
        assert np.all(opt.acc[0] >= 0)


def test_missing_gradient_rejected():
    a, b = tn.parameter(np.zeros(2)), tn.parameter(np.zeros(3))
    a.grad = np.ones(2)
    with pytest.raises(ValueError, match="parameter 1"):
        RMSProp([a, b]).step()
    assert a.data.tolist() == [0.0, 0.0]


@pytest.mark.parametrize("kw", [{"decay": 1.0}, {"decay": 0.0}, {"lr": 0.0}])
def test_bad_hyperparameters(kw):
    with pytest.raises(ValueError):
        RMSProp([tn.parameter(np.zeros(1))], **kw)


def test_step_schedule():
    bounds = every_n(90, 30)
    assert bounds == [30, 60]
    assert step_lr(0.01, 0, bounds) == 0.01
    assert step_lr(0.01, 29, bounds) == 0.01
    assert step_lr(0.01, 30, bounds) == pytest.approx(0.001)
    assert step_lr(0.01, 89, bounds) == pytest.approx(0.0001)
