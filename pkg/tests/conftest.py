import numpy as np
import pytest


def numeric_grad(fn, arr, eps=1e-6):
    """Central finite differences of a scalar function wrt one array.

    ``fn`` must read ``arr`` by reference (in-place perturbation).
    """
    assert arr.flags["C_CONTIGUOUS"], "in-place FD needs a contiguous array"
    out = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp = fn()
        flat[i] = old - eps
        lm = fn()
        flat[i] = old
        gflat[i] = (lp - lm) / (2.0 * eps)
    return out


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).max() / max(np.abs(b).max(), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
