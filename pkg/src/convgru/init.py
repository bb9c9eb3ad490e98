"""Seeded parameter initializers.

Conv/dense input kernels use fan-in scaled (Kaiming-style) uniform draws;
1x1 recurrent kernels use a plain 1/sqrt(fan_in) uniform; biases start at
zero. All draws come from the caller's generator so builds are reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, gain: float = 1.0, dtype=np.float32) -> Tensor:
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def leaky_gain(alpha: float) -> float:
    return math.sqrt(2.0 / (1.0 + alpha * alpha))


def recurrent_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
