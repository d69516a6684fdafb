"""Inverted dropout with masks shared by key.

A mask is a function of ``(seed, key)`` only. Sequences get one mask per
feature, broadcast over time steps, and two calls with the same key inside
one forward pass (for example the context and question passing through a
shared BiLSTM) get the identical mask.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, mul, rng_stream


class DropoutConfigError(ValueError):
    pass


def dropout_mask(shape, rate: float, stream) -> np.ndarray:
    """Entries are 0 with probability ``rate`` and ``1/(1-rate)`` otherwise."""
    if not 0.0 <= rate < 1.0:
        raise DropoutConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    seed, key = stream
    keep = rng_stream(seed, f"dropout/{key}").random(shape) >= rate
    return keep / (1.0 - rate)


class DropoutPolicy:
    """Applies dropout at named sites during one training forward pass.

    ``site`` is ``"embedding"`` for embedding outputs and ``"linear"`` for the
    input of a parameterised transform. Every application is logged in
    ``self.log`` as ``(site, key, mask)``.
    """

    def __init__(self, rate: float, seed: int):
        if not 0.0 <= rate < 1.0:
            raise DropoutConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.log: list[tuple[str, str, np.ndarray]] = []
        self._masks: dict[str, np.ndarray] = {}

    def mask(self, key: str, width: int) -> np.ndarray:
        m = self._masks.get(key)
        if m is None or m.shape[0] != width:
            m = dropout_mask((width,), self.rate, (self.seed, key))
            self._masks[key] = m
        return m

    def __call__(self, x: Tensor, key: str, site: str = "linear") -> Tensor:
        m = self.mask(key, x.shape[-1])
        self.log.append((site, key, m))
        if self.rate == 0.0:
            return x
        return mul(x, m)


def apply(drop: DropoutPolicy | None, x: Tensor, key: str, site: str = "linear") -> Tensor:
    return x if drop is None else drop(x, key, site)
