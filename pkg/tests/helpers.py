from typing import Callable

import numpy as np


def finite_difference(fn: Callable[[], float], params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of fn with respect to the writable array params."""
    grad = np.zeros(params.size)
    for i in range(params.size):
        original = params[i]
        params[i] = original + step
        up = fn()
        params[i] = original - step
        down = fn()
        params[i] = original
        grad[i] = (up - down) / (2 * step)
    return grad


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-5) -> None:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-3)
    assert np.linalg.norm(analytic - numeric) <= rel * scale
