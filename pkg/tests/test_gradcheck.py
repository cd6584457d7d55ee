import numpy as np

from fcan import tensor as tn
from fcan.gradcheck import grad_check, relative_error
from fcan.rng import Rng


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == 1e-3
    assert relative_error(2.0, 1.0) == 0.5


def test_detects_wrong_gradient(monkeypatch):
    x = tn.parameter(np.array([0.3, -1.2, 2.0]))
    good = grad_check(lambda: tn.sum(tn.mul(x, x)), [x])
    assert good < 1e-8
    monkeypatch.setitem(tn.BACKWARD, "mul", lambda ctx, g: (g, g))
    assert grad_check(lambda: tn.sum(tn.mul(x, x)), [x]) > 0.1


def test_subsamples_large_params():
    x = tn.parameter(Rng(0).normal(500))
    calls = []

    def fn():
        calls.append(1)
        return tn.sum(tn.mul(x, x))
    grad_check(fn, [x], max_coords=10)
    assert len(calls) == 1 + 2 * 10


def test_parameters_restored():
    x = tn.parameter(np.array([1.0, 2.0]))
    before = x.data.copy()
    grad_check(lambda: tn.sum(tn.mul(x, x)), [x])
    assert np.array_equal(x.data, before)
    assert x.grad is None
