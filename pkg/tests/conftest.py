import numpy as np
import pytest

from yoloroc.autograd import Tape, value


def tape_vs_fd(fn, arrays, seed=0, step=1e-6):
    """Max relative error of tape gradients vs per-element central differences.

    ``fn(*tensors)`` must return a tensor; the scalar is ``sum(out * R)``.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        vs = [tape.watch(a) for a in arrays]
        out = fn(*vs)
    r = rng.standard_normal(value(out).shape)
    tape.backward(out, r)
    worst = 0.0
    for i, a in enumerate(arrays):
        g = tape.grad(vs[i])
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            num = (np.sum(value(fn(*plus)) * r) - np.sum(value(fn(*minus)) * r)) / (2 * step)
            worst = max(worst, abs(g[idx] - num) / (abs(g[idx]) + 1e-8))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
