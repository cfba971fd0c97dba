import numpy as np
import pytest

from attnaspp.tensor import Tape, Tensor, mul
from attnaspp.tensor import sum as tsum


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def grads_of(fn, inputs, weight=None):
    """Analytic grads of ``sum(fn() * weight)`` w.r.t. ``inputs``."""
    for t in inputs:
        t.grad = None
    with Tape():
        out = fn()
        w = np.ones(out.shape) if weight is None else weight
        loss = tsum(mul(out, w))
    loss.backward()
    return [t.grad for t in inputs]


def numeric_grads(fn, inputs, weight=None, h=1e-6):
    out = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().data
            flat[i] = orig - h
            fm = fn().data
            flat[i] = orig
            w = np.ones(fp.shape) if weight is None else weight
            gflat[i] = np.sum((fp - fm) * w) / (2 * h)
        out.append(g)
    return out
