"""LoRA and prefix-tuning adapters.

Both kinds hold the only trainable parameters in the stack. A LoRA adapter
adds ``(alpha/rank) * B @ A`` to targeted attention projections at runtime;
a prefix adapter prepends trainable key/value rows to every attention
layer. Base weights are never mutated; merging produces a new bundle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    CorruptFileError,
    DimensionError,
    RankError,
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
from .model import ModelBundle, ModelConfig
from .rng import Rng
from .tensor import Precision, Tensor

ADAPTER_MAGIC = b"NGLA"
ADAPTER_VERSION = 1

LORA_TARGETS = ("q", "v")
LORA_INIT_STD = 0.02
PREFIX_INIT_STD = 0.5


@dataclass
class LoraPiece:
    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)


class LoraAdapter:
    kind = "lora"

    def __init__(self, n_layers: int, rank: int, alpha: float, targets: tuple[str, ...],
                 pieces: dict[tuple[int, str], LoraPiece]):
        if rank < 1:
            raise RankError(f"rank must be >= 1, got {rank}")
        if alpha <= 0:
            raise ConfigurationError("alpha", "must be positive")
        bad = [t for t in targets if t not in LORA_TARGETS]
        if bad:
            raise ConfigurationError("targets", f"unsupported projections {bad}; allowed: {LORA_TARGETS}")
        self.n_layers = n_layers
        self.rank = rank
        self.alpha = float(alpha)
        self.targets = tuple(targets)
        self.pieces = pieces

    @property
    def scale(self) -> float:
        # Always recomputed; never stored separately.
        return self.alpha / self.rank

    def piece(self, layer: int, proj: str):
        p = self.pieces.get((layer, proj))
        if p is None:
            return None
        return p.a, p.b, self.scale

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, keyed canonically."""
        out = {}
        for (layer, proj), p in sorted(self.pieces.items()):
            out[f"layers.{layer}.{proj}.A"] = p.a
            out[f"layers.{layer}.{proj}.B"] = p.b
        return out

    def param_count(self) -> int:
        return sum(p.a.size + p.b.size for p in self.pieces.values())

    def copy(self) -> "LoraAdapter":
        pieces = {k: LoraPiece(p.a.copy(), p.b.copy()) for k, p in self.pieces.items()}
        return LoraAdapter(self.n_layers, self.rank, self.alpha, self.targets, pieces)

    def astype(self, precision: Precision) -> "LoraAdapter":
        dt = precision.dtype
        pieces = {k: LoraPiece(p.a.astype(dt), p.b.astype(dt)) for k, p in self.pieces.items()}
        return LoraAdapter(self.n_layers, self.rank, self.alpha, self.targets, pieces)


class PrefixAdapter:
    kind = "prefix"

    def __init__(self, n_layers: int, prefix_len: int, kv: list[tuple[np.ndarray, np.ndarray]]):
        if prefix_len < 0:
            raise ConfigurationError("prefix_len", "must be >= 0")
        if len(kv) != n_layers:
            raise DimensionError(f"prefix adapter has {len(kv)} layer blocks for {n_layers} layers")
        self.n_layers = n_layers
        self.prefix_len = prefix_len
        self.kv = kv

    def prefix_kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        return self.kv[layer]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, v) in enumerate(self.kv):
            out[f"layers.{i}.prefix.k"] = k
            out[f"layers.{i}.prefix.v"] = v
        return out

    def param_count(self) -> int:
        return sum(k.size + v.size for k, v in self.kv)

    def copy(self) -> "PrefixAdapter":
        return PrefixAdapter(self.n_layers, self.prefix_len, [(k.copy(), v.copy()) for k, v in self.kv])

    def astype(self, precision: Precision) -> "PrefixAdapter":
        dt = precision.dtype
        return PrefixAdapter(self.n_layers, self.prefix_len, [(k.astype(dt), v.astype(dt)) for k, v in self.kv])


def init_lora(config: ModelConfig, rank: int = 8, alpha: float = 16.0,
              targets: tuple[str, ...] = ("q", "v"), seed: int = 0,
              precision: Precision = Precision.F32) -> LoraAdapter:
    """Fresh LoRA adapter: A ~ N(0, 0.02^2) seeded, B = 0 (exact no-op)."""
    d = config.d_model
    if rank > d:
        raise RankError(f"rank {rank} exceeds projection dims {d}x{d}")
    rng = Rng(seed)
    dt = precision.dtype
    pieces: dict[tuple[int, str], LoraPiece] = {}
    for layer in range(config.n_layers):
        for proj in sorted(set(targets)):
            a = rng.normal_matrix((rank, d), LORA_INIT_STD).astype(dt)
            b = np.zeros((d, rank), dtype=dt)
            pieces[(layer, proj)] = LoraPiece(a, b)
    return LoraAdapter(config.n_layers, rank, alpha, tuple(sorted(set(targets))), pieces)


def init_prefix(config: ModelConfig, prefix_len: int, seed: int = 0,
                precision: Precision = Precision.F32) -> PrefixAdapter:
    rng = Rng(seed)
    dt = precision.dtype
    kv = []
    for _ in range(config.n_layers):
        k = rng.normal_matrix((prefix_len, config.d_model), PREFIX_INIT_STD).astype(dt)
        v = rng.normal_matrix((prefix_len, config.d_model), PREFIX_INIT_STD).astype(dt)
        kv.append((k, v))
    return PrefixAdapter(config.n_layers, prefix_len, kv)


def apply_lora(base_out: Tensor, x: Tensor, piece: LoraPiece, scale: float) -> Tensor:
    """base_out + scale * (x @ A.T) @ B.T for row-major activations x."""
    if x.shape[-1] != piece.a.shape[1]:
        raise DimensionError(f"lora: input width {x.shape} does not match A {piece.a.shape}")
    if base_out.shape[-1] != piece.b.shape[0]:
        raise DimensionError(f"lora: output width {base_out.shape} does not match B {piece.b.shape}")
    return Tensor(base_out.a + scale * ((x.a @ piece.a.T) @ piece.b.T))


def apply_prefix(k: Tensor, v: Tensor, adapter: PrefixAdapter, layer: int) -> tuple[Tensor, Tensor]:
    """Prepend the layer's trainable prefix rows to key/value tensors."""
    kp, vp = adapter.prefix_kv(layer)
    if kp.shape[1] != k.shape[1]:
        raise DimensionError(f"prefix width {kp.shape} does not match keys {k.shape}")
    dt = k.a.dtype
    return Tensor(np.vstack([kp.astype(dt), k.a])), Tensor(np.vstack([vp.astype(dt), v.a]))


def _lora_target_names(adapter: LoraAdapter) -> dict[tuple[int, str], str]:
    return {(layer, proj): f"layers.{layer}.attn.{proj}" for (layer, proj) in adapter.pieces}


def merge_lora(bundle: ModelBundle, adapter: LoraAdapter) -> ModelBundle:
    """New bundle with W' = W + scale * B @ A folded into each target."""
    updates: dict[str, Tensor] = {}
    for key, name in _lora_target_names(adapter).items():
        w = bundle.w(name)
        p = adapter.pieces[key]
        if p.b.shape[0] != w.shape[0] or p.a.shape[1] != w.shape[1]:
            raise DimensionError(f"merge: adapter piece {key} does not fit {name} of shape {w.shape}")
        updates[name] = Tensor(w + adapter.scale * (p.b @ p.a))
    return bundle.with_weights(updates)


def unmerge_lora(bundle: ModelBundle, adapter: LoraAdapter) -> ModelBundle:
    """Inverse of :func:`merge_lora` up to float roundoff."""
    updates: dict[str, Tensor] = {}
    for key, name in _lora_target_names(adapter).items():
        w = bundle.w(name)
        p = adapter.pieces[key]
        updates[name] = Tensor(w - adapter.scale * (p.b @ p.a))
    return bundle.with_weights(updates)


def trainable_fraction(bundle: ModelBundle, adapter) -> float:
    return adapter.param_count() / bundle.param_count()


def save_adapter(adapter, path) -> None:
    with open(path, "wb") as f:
        if adapter.kind == "lora":
            meta = {
                "kind": "lora",
                "n_layers": adapter.n_layers,
                "rank": adapter.rank,
                "alpha": adapter.alpha,
                "targets": list(adapter.targets),
            }
            write_header(f, ADAPTER_MAGIC, ADAPTER_VERSION, meta)
            params = adapter.params()
            write_record_count(f, len(params))
            for name in sorted(params):
                write_tensor_record(f, name, params[name])
        elif adapter.kind == "prefix":
            meta = {"kind": "prefix", "n_layers": adapter.n_layers, "prefix_len": adapter.prefix_len}
            write_header(f, ADAPTER_MAGIC, ADAPTER_VERSION, meta)
            params = adapter.params()
            write_record_count(f, len(params))
            for name in sorted(params):
                write_tensor_record(f, name, params[name])
        else:
            raise ConfigurationError("adapter", f"unknown kind {adapter.kind!r}")


def load_adapter(path):
    with open(path, "rb") as f:
        meta = read_header(f, ADAPTER_MAGIC, ADAPTER_VERSION)
        kind = meta.get("kind")
        n = read_record_count(f)
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n):
            name, arr = read_tensor_record(f)
            tensors[name] = arr
        if f.read(1):
            raise CorruptFileError("trailing bytes after final tensor record")
    if kind == "lora":
        n_layers, rank = int(meta["n_layers"]), int(meta["rank"])
        targets = tuple(meta["targets"])
        pieces: dict[tuple[int, str], LoraPiece] = {}
        for layer in range(n_layers):
            for proj in targets:
                try:
                    a = tensors[f"layers.{layer}.{proj}.A"]
                    b = tensors[f"layers.{layer}.{proj}.B"]
                except KeyError as exc:
                    raise CorruptFileError(f"adapter file lacks tensor {exc}") from exc
                if a.shape[0] != rank or b.shape[1] != rank:
                    raise ShapeMismatchError(
                        f"layers.{layer}.{proj}: A {a.shape} / B {b.shape} inconsistent with rank {rank}"
                    )
                pieces[(layer, proj)] = LoraPiece(a, b)
        return LoraAdapter(n_layers, rank, float(meta["alpha"]), targets, pieces)
    if kind == "prefix":
        n_layers, plen = int(meta["n_layers"]), int(meta["prefix_len"])
        kv = []
        for layer in range(n_layers):
            try:
                k = tensors[f"layers.{layer}.prefix.k"]
                v = tensors[f"layers.{layer}.prefix.v"]
            except KeyError as exc:
                raise CorruptFileError(f"adapter file lacks tensor {exc}") from exc
            kv.append((k, v))
        return PrefixAdapter(n_layers, plen, kv)
    raise CorruptFileError(f"unknown adapter kind {kind!r}")
