"""Finite-difference gradient checking."""

import numpy as np


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(fn, params, eps=1e-6, max_coords=64, rng=None, floor=1e-6):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` takes no arguments and returns a scalar Tensor built from ``params``.
    Parameters with more than ``max_coords`` entries are checked on a random
    coordinate subset drawn from ``rng`` (an ``fcan.rng.Rng``; seed 0 if None).
    """
    if rng is None:
        from .rng import Rng
        rng = Rng(0)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if flat.size > max_coords:
            coords = rng.permutation(flat.size)[:max_coords]
        else:
            coords = range(flat.size)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            fp = fn().item()
            flat[i] = old - eps
            fm = fn().item()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(a.reshape(-1)[i], num, floor)))
    return worst
