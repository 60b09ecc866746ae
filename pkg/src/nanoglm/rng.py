"""Deterministic random number generation.

The whole package draws randomness from splitmix64 (Steele, Lea & Flood,
"Fast splittable pseudorandom number generators", OOPSLA 2014): a 64-bit
counter advanced by the golden-ratio increment, mixed through two
multiply-xorshift rounds. The algorithm is pinned here so that token
sequences, adapter initialization, and data shuffles reproduce exactly on
any platform, independent of numpy's generator internals.

Two equivalent interfaces are provided:

* functional: ``next_u64(state) -> (value, new_state)`` where ``state`` is a
  plain int. The sampler threads these values explicitly.
* stateful: :class:`Rng`, a thin mutable wrapper used by loops (training,
  initialization) where threading the int by hand would be noise.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def next_u64(state: int) -> tuple[int, int]:
    """Advance the splitmix64 state; return (64-bit output, new state)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31), state


def next_uniform(state: int) -> tuple[float, int]:
    """Uniform double in [0, 1) using the top 53 bits."""
    z, state = next_u64(state)
    return (z >> 11) * 2.0**-53, state


def split(state: int) -> tuple[int, int]:
    """Derive an independent child seed; return (child_seed, new_state)."""
    child, state = next_u64(state)
    return child, state


class Rng:
    """Mutable splitmix64 stream."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def u64(self) -> int:
        z, self.state = next_u64(self.state)
        return z

    def uniform(self) -> float:
        u, self.state = next_uniform(self.state)
        return u

    def randint(self, n: int) -> int:
        """Integer in [0, n) by rejection-free modular reduction (n << 2**64)."""
        return self.u64() % n

    def split(self) -> "Rng":
        return Rng(self.u64())

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.u64() % (i + 1)
            items[i], items[j] = items[j], items[i]

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform()
        return out

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller normals scaled by ``std``."""
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        # Guard log(0); 2**-53 keeps the value finite without biasing the tail.
        r = np.sqrt(-2.0 * np.log(np.maximum(u1, 2.0**-53)))
        theta = 2.0 * math.pi * u2
        pair = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return std * pair[:n]

    def normal_matrix(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        return self.normals(int(np.prod(shape)), std).reshape(shape)
