"""Desk-scale decoder-only transformer.

Pre-norm residual blocks, multi-head causal attention, GELU feed-forward,
learned absolute position embeddings, byte-level tokenizer. Weights live in
an immutable :class:`ModelBundle`; adapters are applied at runtime and never
mutate the bundle.

Weight orientation: every projection ``W`` is stored ``(d_out, d_in)`` and
applied to row-major activations as ``y = x @ W.T``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    CorruptFileError,
    DimensionError,
    SequenceLengthError,
    ShapeMismatchError,
)
from .fileio import (
    read_header,
    read_record_count,
    read_tensor_record,
    write_header,
    write_record_count,
    write_tensor_record,
)
from .rng import Rng
from .tensor import Precision, Tensor, layer_norm_np, softmax_np
from .tokenizer import ByteTokenizer

WEIGHT_MAGIC = b"NGLM"
WEIGHT_VERSION = 1

LN_EPS = 1e-5

# Initialization scales for fresh models. Chosen so the default desk model
# can be driven to memorize a small corpus through rank-8 q/v deltas alone:
# the output head needs enough norm that aligned final states can produce
# decisive logit margins.
INIT_STD = {
    "embed": 0.30,
    "pos": 0.10,
    "attn": 0.125,
    "ff_in": 0.125,
    "ff_out": 0.0625,
    "lm_head": 0.60,
}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_special: int = 4
    max_seq_len: int = 512

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigurationError("n_layers", "must be >= 1")
        if self.n_heads < 1:
            raise ConfigurationError("n_heads", "must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError("d_model", f"{self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff < 1:
            raise ConfigurationError("d_ff", "must be >= 1")
        if self.max_seq_len < 1:
            raise ConfigurationError("max_seq_len", "must be >= 1")

    @property
    def vocab_size(self) -> int:
        return 256 + self.n_special

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_special": self.n_special,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(d[k]) for k in ("n_layers", "d_model", "n_heads", "d_ff", "n_special", "max_seq_len")})


def canonical_weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name a bundle must carry, with its shape."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (v, d),
        "pos": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm.g"] = (d,)
        shapes[f"{p}.attn_norm.b"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}"] = (d, d)
        shapes[f"{p}.ff_norm.g"] = (d,)
        shapes[f"{p}.ff_norm.b"] = (d,)
        shapes[f"{p}.ff.in"] = (f, d)
        shapes[f"{p}.ff.out"] = (d, f)
    shapes["final_norm.g"] = (d,)
    shapes["final_norm.b"] = (d,)
    shapes["lm_head"] = (v, d)
    return shapes


def param_count_formula(config: ModelConfig) -> int:
    """Closed-form parameter count implied by the config dimensions."""
    d, f, v, l = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    per_layer = 4 * d + 4 * d * d + 2 * d * f
    return v * d + config.max_seq_len * d + l * per_layer + 2 * d + v * d


class ModelBundle:
    """Config + named weight tensors + tokenizer. Immutable after load."""

    def __init__(self, config: ModelConfig, weights: dict[str, Tensor]):
        expected = canonical_weight_shapes(config)
        missing = sorted(set(expected) - set(weights))
        if missing:
            raise CorruptFileError(f"missing weight tensors: {missing}")
        extra = sorted(set(weights) - set(expected))
        if extra:
            raise CorruptFileError(f"unexpected weight tensors: {extra}")
        for name, shape in expected.items():
            if weights[name].shape != shape:
                raise ShapeMismatchError(
                    f"tensor {name!r}: stored shape {weights[name].shape} != expected {shape}"
                )
        precisions = {w.precision for w in weights.values()}
        if len(precisions) != 1:
            raise ConfigurationError("weights", f"mixed precisions {precisions}")
        self.config = config
        self.weights = dict(weights)
        self.tokenizer = ByteTokenizer(config.n_special)
        self.precision = next(iter(precisions))

    def w(self, name: str) -> np.ndarray:
        return self.weights[name].a

    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def weight_fingerprint(self) -> str:
        """SHA-256 over all weight bytes in canonical name order."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            w = self.weights[name]
            h.update(name.encode("utf-8"))
            h.update(json.dumps(w.shape).encode())
            h.update(w.a.tobytes(order="C"))
        return h.hexdigest()

    def astype(self, precision: Precision) -> "ModelBundle":
        if precision is self.precision:
            return self
        return ModelBundle(self.config, {k: w.astype(precision) for k, w in self.weights.items()})

    def with_weights(self, updates: dict[str, Tensor]) -> "ModelBundle":
        """New bundle with some tensors replaced; the original is untouched."""
        merged = dict(self.weights)
        merged.update(updates)
        return ModelBundle(self.config, merged)


def init_model(config: ModelConfig, seed: int = 0, precision: Precision = Precision.F32) -> ModelBundle:
    """Fresh seeded bundle with the documented initialization scheme."""
    rng = Rng(seed)
    dt = precision.dtype
    weights: dict[str, Tensor] = {}
    for name, shape in canonical_weight_shapes(config).items():
        if name.endswith("norm.g"):
            arr = np.ones(shape, dtype=dt)
        elif name.endswith("norm.b"):
            arr = np.zeros(shape, dtype=dt)
        else:
            if name == "embed":
                std = INIT_STD["embed"]
            elif name == "pos":
                std = INIT_STD["pos"]
            elif name == "lm_head":
                std = INIT_STD["lm_head"]
            elif ".ff.in" in name:
                std = INIT_STD["ff_in"]
            elif ".ff.out" in name:
                std = INIT_STD["ff_out"]
            else:
                std = INIT_STD["attn"]
            arr = rng.normal_matrix(shape, std).astype(dt)
        weights[name] = Tensor(arr)
    return ModelBundle(config, weights)


class KvCache:
    """Per-layer key/value store for incremental decoding.

    ``pos`` counts real tokens; prefix rows from a prefix adapter occupy the
    first ``prefix_len`` slots of every layer and are written once on first
    use. The position counter always equals the cached length minus the
    prefix for every layer.
    """

    def __init__(self, config: ModelConfig, precision: Precision = Precision.F32, prefix_len: int = 0):
        if prefix_len >= config.max_seq_len:
            raise SequenceLengthError(
                f"prefix length {prefix_len} leaves no room in max_seq_len={config.max_seq_len}"
            )
        cap = config.max_seq_len
        dt = precision.dtype
        self.k = [np.zeros((cap, config.d_model), dtype=dt) for _ in range(config.n_layers)]
        self.v = [np.zeros((cap, config.d_model), dtype=dt) for _ in range(config.n_layers)]
        self.prefix_len = prefix_len
        self.prefix_written = False
        self.pos = 0

    @property
    def length(self) -> int:
        return self.prefix_len + self.pos


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def normalize_adapters(adapters) -> tuple[object | None, object | None]:
    """Accept None, a single adapter, or an iterable; return (lora, prefix)."""
    if adapters is None:
        return None, None
    if not isinstance(adapters, (list, tuple)):
        adapters = (adapters,)
    lora = prefix = None
    for ad in adapters:
        if ad is None:
            continue
        kind = getattr(ad, "kind", None)
        if kind == "lora":
            if lora is not None:
                raise ConfigurationError("adapters", "more than one LoRA adapter supplied")
            lora = ad
        elif kind == "prefix":
            if prefix is not None:
                raise ConfigurationError("adapters", "more than one prefix adapter supplied")
            prefix = ad
        else:
            raise ConfigurationError("adapters", f"unknown adapter kind {kind!r}")
    return lora, prefix


def make_cache(bundle: ModelBundle, adapters=None) -> KvCache:
    _, prefix = normalize_adapters(adapters)
    p = prefix.prefix_len if prefix is not None else 0
    return KvCache(bundle.config, bundle.precision, prefix_len=p)


def _projected(n1: np.ndarray, w: np.ndarray, lora_piece) -> np.ndarray:
    out = n1 @ w.T
    if lora_piece is not None:
        a, b, scale = lora_piece
        out = out + scale * ((n1 @ a.T) @ b.T)
    return out


def forward(bundle: ModelBundle, tokens: Sequence[int], adapters=None, cache: KvCache | None = None) -> Tensor:
    """Next-token logits for the last position of ``tokens``.

    Without a cache the whole sequence is processed in one pass. With a
    cache, ``tokens`` are treated as the new suffix and prior positions are
    read from the cache.
    """
    lora, prefix = normalize_adapters(adapters)
    cfg = bundle.config
    if len(tokens) == 0:
        raise DimensionError("forward: empty token sequence")
    for t in tokens:
        if not (0 <= t < cfg.vocab_size):
            raise DimensionError(f"forward: token id {t} outside vocab of {cfg.vocab_size}")

    own_cache = cache is None
    if own_cache:
        cache = make_cache(bundle, adapters)
    elif prefix is not None and cache.prefix_len != prefix.prefix_len:
        raise ConfigurationError("cache", "cache prefix length does not match the prefix adapter")

    p = cache.prefix_len
    start = cache.pos
    t_new = len(tokens)
    if p + start + t_new > cfg.max_seq_len:
        raise SequenceLengthError(
            f"sequence of {start}+{t_new} tokens plus prefix {p} exceeds max_seq_len={cfg.max_seq_len}"
        )

    dt = bundle.precision.dtype
    ids = np.asarray(tokens, dtype=np.int64)
    x = bundle.w("embed")[ids] + bundle.w("pos")[start : start + t_new]
    x = x.astype(dt, copy=True)

    if prefix is not None and not cache.prefix_written:
        for i in range(cfg.n_layers):
            kp, vp = prefix.prefix_kv(i)
            cache.k[i][:p] = kp.astype(dt)
            cache.v[i][:p] = vp.astype(dt)
        cache.prefix_written = True

    h = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)
    total = p + start + t_new
    # Boolean mask shared by all layers: row i may attend to prefix plus
    # token positions <= start + i.
    col = np.arange(total)
    blocked = col[None, :] > (p + start + np.arange(t_new))[:, None]

    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        n1 = layer_norm_np(x, bundle.w(f"{pre}.attn_norm.g"), bundle.w(f"{pre}.attn_norm.b"), LN_EPS)
        q = _projected(n1, bundle.w(f"{pre}.attn.q"), lora.piece(i, "q") if lora else None)
        k = n1 @ bundle.w(f"{pre}.attn.k").T
        v = _projected(n1, bundle.w(f"{pre}.attn.v"), lora.piece(i, "v") if lora else None)

        cache.k[i][p + start : total] = k
        cache.v[i][p + start : total] = v

        qh = split_heads(q, h)
        kh = split_heads(cache.k[i][:total], h)
        vh = split_heads(cache.v[i][:total], h)
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        scores[:, blocked] = -np.inf
        att = softmax_np(scores, axis=-1)
        ctx = merge_heads(att @ vh)
        x = x + ctx @ bundle.w(f"{pre}.attn.o").T

        n2 = layer_norm_np(x, bundle.w(f"{pre}.ff_norm.g"), bundle.w(f"{pre}.ff_norm.b"), LN_EPS)
        x = x + gelu_np(n2 @ bundle.w(f"{pre}.ff.in").T) @ bundle.w(f"{pre}.ff.out").T

    cache.pos = start + t_new
    nf = layer_norm_np(x[-1:], bundle.w("final_norm.g"), bundle.w("final_norm.b"), LN_EPS)
    logits = (nf @ bundle.w("lm_head").T)[0]
    return Tensor(logits)


def save_model(bundle: ModelBundle, path) -> None:
    with open(path, "wb") as f:
        write_header(f, WEIGHT_MAGIC, WEIGHT_VERSION, {"config": bundle.config.to_dict()})
        names = sorted(bundle.weights)
        write_record_count(f, len(names))
        for name in names:
            write_tensor_record(f, name, bundle.weights[name].a)


def load_model(path) -> ModelBundle:
    with open(path, "rb") as f:
        meta = read_header(f, WEIGHT_MAGIC, WEIGHT_VERSION)
        if "config" not in meta:
            raise CorruptFileError("weight file meta lacks a config block")
        config = ModelConfig.from_dict(meta["config"])
        n = read_record_count(f)
        weights: dict[str, Tensor] = {}
        for _ in range(n):
            name, arr = read_tensor_record(f)
            weights[name] = Tensor(arr)
        trailing = f.read(1)
        if trailing:
            raise CorruptFileError("trailing bytes after final tensor record")
    return ModelBundle(config, weights)
