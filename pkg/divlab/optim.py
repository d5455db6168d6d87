from __future__ import annotations

from typing import Dict, Final, Mapping, MutableMapping

import numpy as np
from numpy.typing import NDArray

default_betas: Final = (0.9, 0.999)
default_eps: Final = 1e-8


class Adam:
    """Adam updates applied in place to a mapping of named parameter arrays."""

    def __init__(self, params: MutableMapping[str, NDArray[np.float64]], learning_rate: float,
                 betas: tuple = default_betas, eps: float = default_eps) -> None:
        if learning_rate <= 0:
            raise ValueError(f"Learning rate must be positive: {learning_rate}")

        self._params = params
        self._learning_rate = learning_rate
        self._betas = betas
        self._eps = eps
        self._step = 0

        self._m: Dict[str, NDArray[np.float64]] = {k: np.zeros_like(v) for (k, v) in params.items()}
        self._v: Dict[str, NDArray[np.float64]] = {k: np.zeros_like(v) for (k, v) in params.items()}

    @property
    def step_count(self) -> int:
        return self._step

    def step(self, grads: Mapping[str, NDArray[np.float64]]) -> None:
        self._step += 1

        (beta1, beta2) = self._betas

        correction1 = 1.0 - beta1 ** self._step
        correction2 = 1.0 - beta2 ** self._step

        for (name, grad) in grads.items():
            m = self._m[name]
            v = self._v[name]

            m *= beta1
            m += (1.0 - beta1) * grad

            v *= beta2
            v += (1.0 - beta2) * grad * grad

            self._params[name] -= self._learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self._eps)
