"""Incremental token generation: forward with KV cache + sampler.

Shared by training probes, the chat service, and the CLI. Text deltas are
produced through an incremental UTF-8 decoder, so multi-byte characters
split across byte tokens still concatenate to the exact final text.
"""

from __future__ import annotations

import codecs
from dataclasses import dataclass
from typing import Iterator, Sequence

from .model import ModelBundle, forward, make_cache
from .sampling import SamplerConfig, sample_token


@dataclass
class GenResult:
    token_ids: list[int]
    text: str
    finish_reason: str  # "eos" | "length" | "overflow"
    overflow: bool
    rng_state: int


def prompt_token_ids(bundle: ModelBundle, text: str) -> list[int]:
    """Single-turn prompt encoding: [BOS] text [SEP]."""
    tok = bundle.tokenizer
    return [tok.bos_id] + tok.encode(text) + [tok.sep_id]


def stream_generate(bundle: ModelBundle, adapters, prompt_ids: Sequence[int],
                    config: SamplerConfig, rng_state: int) -> Iterator[tuple[int, str, "GenResult | None"]]:
    """Yield (token_id, text_delta, None) per token, then (-1, "", GenResult).

    The concatenation of all text deltas equals the final decoded text.
    """
    cache = make_cache(bundle, adapters)
    tok = bundle.tokenizer
    decoder = codecs.getincrementaldecoder("utf-8")("replace")
    max_room = bundle.config.max_seq_len - cache.prefix_len

    logits = forward(bundle, list(prompt_ids), adapters, cache)
    ids: list[int] = []
    pieces: list[str] = []
    finish = "length"
    for _ in range(config.max_new_tokens):
        token, rng_state = sample_token(logits, config, rng_state)
        if config.stop_on_eos and token == tok.eos_id:
            finish = "eos"
            break
        ids.append(token)
        delta = decoder.decode(bytes([token - tok.n_special])) if token >= tok.n_special else ""
        pieces.append(delta)
        yield token, delta, None
        if cache.pos + 1 > max_room:
            finish = "overflow"
            break
        logits = forward(bundle, [token], adapters, cache)

    tail = decoder.decode(b"", final=True)
    if tail:
        pieces.append(tail)
        yield -1, tail, None
    text = "".join(pieces)
    yield -1, "", GenResult(ids, text, finish, finish == "overflow", rng_state)


def generate(bundle: ModelBundle, adapters, prompt: str | Sequence[int],
             config: SamplerConfig, rng_state: int = 0) -> tuple[GenResult, int]:
    """Non-streaming wrapper; returns (result, advanced rng state)."""
    ids = prompt_token_ids(bundle, prompt) if isinstance(prompt, str) else list(prompt)
    result = None
    for _, _, final in stream_generate(bundle, adapters, ids, config, rng_state):
        if final is not None:
            result = final
    assert result is not None
    return result, result.rng_state
