# backend/tests/gradcheck.py
# Central finite differences for gradient tests

from typing import Callable

import numpy as np

STEP = 1e-5


def numeric_gradient(
    loss: Callable[[], float], array: np.ndarray, index, step: float = STEP
) -> float:
    """d(loss)/d(array[index]) by central differences; `array` is perturbed in place"""
    original = array[index]
    array[index] = original + step
    upper = loss()
    array[index] = original - step
    lower = loss()
    array[index] = original
    return (upper - lower) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_array_gradient(
    loss: Callable[[], float],
    array: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    samples: int = 10,
    tolerance: float = 1e-4,
) -> None:
    """Compare `analytic` with finite differences at `samples` random entries"""
    assert analytic.shape == array.shape, f"{analytic.shape} != {array.shape}"
    flat_indices = rng.choice(array.size, size=min(samples, array.size), replace=False)
    for flat in flat_indices:
        index = np.unravel_index(flat, array.shape)
        numeric = numeric_gradient(loss, array, index)
        error = relative_error(float(analytic[index]), numeric)
        assert error < tolerance, (
            f"index {index}: analytic {analytic[index]:.6e} vs numeric "
            f"{numeric:.6e} (relative error {error:.2e})"
        )
