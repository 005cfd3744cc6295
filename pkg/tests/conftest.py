import numpy as np
import pytest

from rnnreg.tensor import Graph, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Independent central-difference gradient of a scalar fn wrt arr entries.

    ``fn`` takes no arguments and must read ``arr`` afresh on every call.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = fn()
        flat[k] = orig - step
        f_minus = fn()
        flat[k] = orig
        gflat[k] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over entries of |a - n| / max(1, |a| + |n|)."""
    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def analytic_grads(loss_fn, params: list[Tensor]) -> list[np.ndarray]:
    """Run loss_fn under a fresh graph and return the params' gradients."""
    for p in params:
        p.grad = None
    with Graph():
        loss = loss_fn()
        backward(loss)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
