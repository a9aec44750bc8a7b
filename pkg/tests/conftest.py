import numpy as np
import pytest

from panostitch import geometry


def fd_gradient(fn, arr, step=1e-3):
    """Dense central-difference gradient of a scalar function (test oracle)."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(arr)
        flat[i] = orig - step
        down = fn(arr)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_rig():
    return geometry.RigConfig.default(erp_height=32, fisheye_size=48)
