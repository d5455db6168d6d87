from typing import Callable

import numpy as np


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6,
                     refresh: Callable[[], None] = lambda: None) -> np.ndarray:
    """Central differences of f with respect to the array x, perturbed in place."""

    grad = np.zeros_like(x)

    for index in np.ndindex(*x.shape):
        saved = x[index]

        x[index] = saved + eps
        refresh()
        upper = f()

        x[index] = saved - eps
        refresh()
        lower = f()

        x[index] = saved
        refresh()

        grad[index] = (upper - lower) / (2 * eps)

    return grad
