import numpy as np
import pytest


def finite_difference(loss_fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued ``loss_fn``.

    ``loss_fn`` takes no arguments and reads ``x`` (perturbed in place), so it
    stays independent of the autodiff path it is checking.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fplus = loss_fn()
        flat[i] = saved - eps
        fminus = loss_fn()
        flat[i] = saved
        gflat[i] = (fplus - fminus) / (2.0 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


@pytest.fixture
def fd():
    return finite_difference
