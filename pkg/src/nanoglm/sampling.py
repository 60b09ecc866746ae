"""Decoding strategies: temperature scaling, nucleus (top-p) filtering,
greedy decoding, and seeded stochastic sampling.

All functions are pure; random state is an explicit splitmix64 integer
passed in and returned (see :mod:`nanoglm.rng` for the pinned algorithm),
so token sequences reproduce exactly across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .rng import next_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class SamplerConfig:
    """temperature 0 is the greedy sentinel: argmax, top_p ignored."""

    temperature: float = 0.95
    top_p: float = 0.7
    seed: int = 0
    max_new_tokens: int = 128
    stop_on_eos: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.temperature < 0:
            raise ConfigurationError("temperature", f"must be >= 0, got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise ConfigurationError("top_p", f"must be in (0, 1], got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ConfigurationError("max_new_tokens", f"must be >= 1, got {self.max_new_tokens}")


def apply_temperature(logits: np.ndarray | Tensor, temperature: float) -> np.ndarray:
    """logits / T for T > 0; T = 0 passes through (caller goes greedy)."""
    arr = logits.a if isinstance(logits, Tensor) else np.asarray(logits)
    if temperature < 0:
        raise ConfigurationError("temperature", f"must be >= 0, got {temperature}")
    if temperature == 0:
        return arr
    return arr / temperature


def top_p_filter(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix with cumulative mass >= p.

    The boundary token is always included; ties between equal probabilities
    break by ascending token id. Returns (kept token ids, renormalized
    probabilities) in descending-probability order.
    """
    if not (0.0 < p <= 1.0):
        raise ConfigurationError("top_p", f"must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    # Stable sort on -p keeps equal-probability tokens in ascending-id order.
    order = np.argsort(-probs, kind="stable")
    sorted_probs = probs[order]
    cum = np.cumsum(sorted_probs)
    # First index where the running sum reaches p; keep through it.
    crossing = int(np.searchsorted(cum, p, side="left"))
    crossing = min(crossing, len(probs) - 1)
    kept = order[: crossing + 1]
    kept_probs = sorted_probs[: crossing + 1]
    return kept, kept_probs / kept_probs.sum()


def sample_token(logits: np.ndarray | Tensor, config: SamplerConfig, rng_state: int) -> tuple[int, int]:
    """Temperature, then top-p, then a categorical draw.

    Returns (token id, advanced rng state). T = 0 returns the argmax
    (lowest id on exact ties) without consuming randomness.
    """
    arr = logits.a if isinstance(logits, Tensor) else np.asarray(logits)
    if config.temperature == 0:
        return int(np.argmax(arr)), rng_state
    scaled = apply_temperature(arr, config.temperature).astype(np.float64)
    shifted = scaled - scaled.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    kept, kept_probs = top_p_filter(probs, config.top_p)
    u, rng_state = next_uniform(rng_state)
    cum = np.cumsum(kept_probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, len(kept) - 1)
    return int(kept[idx]), rng_state
