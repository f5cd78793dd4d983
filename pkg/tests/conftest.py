import numpy as np
import pytest

from catgan import tensor


@pytest.fixture(autouse=True)
def _float64_default():
    """Keep every test at 64-bit unless it opts out explicitly."""
    tensor.set_default_dtype(np.float64)
    yield
    tensor.set_default_dtype(np.float64)


def central_difference(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of a scalar-valued fn at x, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.copy()
    for i in range(x.size):
        orig = flat.flat[i]
        flat.flat[i] = orig + eps
        hi = fn(flat)
        flat.flat[i] = orig - eps
        lo = fn(flat)
        flat.flat[i] = orig
        grad.flat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
