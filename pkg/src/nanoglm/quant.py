"""Group-wise INT4 weight quantization.

Symmetric signed scheme: per group of ``group_size`` consecutive weights
along the input dimension, scale = max|w| / 7 (1.0 for an all-zero group),
codes = clamp(round-half-away-from-zero(w / scale), -7, 7). Code -8 is
unused, which keeps zero exact and the reconstruction bound clean:
|dequant - w| <= scale / 2 for every element, and values of the form
code * scale (zero, the group peak, identity diagonals) reconstruct
exactly.

Scales are stored as float32 (one per group), codes as two-per-byte packed
nibbles with the even index in the low nibble. Projection and feed-forward
matrices are quantized; embeddings, norms, and the output head stay in
float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, CorruptFileError, DimensionError
from .fileio import (
    read_header,
    read_record_count,
    read_tensor_record,
    write_header,
    write_record_count,
    write_tensor_record,
)
from .model import ModelBundle, ModelConfig, canonical_weight_shapes
from .adapters import LoraAdapter, merge_lora
from .tensor import Tensor, matmul_np

QUANT_MAGIC = b"NGQ4"
QUANT_VERSION = 1

DEFAULT_GROUP_SIZE = 32

# Weight names kept in float: small and precision-critical.
_FLOAT_KEEP_SUFFIXES = ("norm.g", "norm.b")
_FLOAT_KEEP_NAMES = ("embed", "pos", "lm_head")


class QuantPolicy(Enum):
    MERGE_THEN_QUANTIZE = "merge"
    QUANT_BASE_KEEP_ADAPTER_FLOAT = "keep-float"


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_group(values) -> tuple[float, np.ndarray]:
    """Quantize one group of <= group_size values; returns (scale, int8 codes)."""
    w = np.asarray(values, dtype=np.float64).reshape(-1)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    s = float(np.float32(peak / 7.0)) if peak > 0.0 else 1.0
    codes = np.clip(_round_half_away(w / s), -7, 7).astype(np.int8)
    return s, codes


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two signed 4-bit codes per byte; even index in the low nibble."""
    flat = codes.astype(np.int8).reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.int8)])
    lo = flat[0::2].astype(np.uint8) & 0x0F
    hi = flat[1::2].astype(np.uint8) & 0x0F
    return (lo | (hi << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    lo = (packed & 0x0F).astype(np.int8)
    hi = ((packed >> 4) & 0x0F).astype(np.int8)
    # Sign-extend 4-bit two's complement.
    lo = np.where(lo > 7, lo - 16, lo)
    hi = np.where(hi > 7, hi - 16, hi)
    out = np.empty(packed.size * 2, dtype=np.int8)
    out[0::2] = lo
    out[1::2] = hi
    return out[:count]


@dataclass
class QuantizedMatrix:
    """INT4 codes + per-group float32 scales for one 2-D weight."""

    shape: tuple[int, int]
    group_size: int
    scales: np.ndarray  # (rows, n_groups) float32
    packed: np.ndarray  # uint8 nibble pairs, row-major

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    @property
    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.packed, self.shape[0] * self.shape[1]).reshape(self.shape)

    def dequantize(self) -> np.ndarray:
        rows, cols = self.shape
        codes = self.codes.astype(np.float32)
        out = np.empty(self.shape, dtype=np.float32)
        for g in range(self.n_groups):
            lo, hi = g * self.group_size, min((g + 1) * self.group_size, cols)
            out[:, lo:hi] = codes[:, lo:hi] * self.scales[:, g : g + 1]
        return out

    def nbytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes


def quantize_matrix(w: np.ndarray, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedMatrix:
    if w.ndim != 2:
        raise DimensionError(f"quantize_matrix expects a 2-D weight, got shape {w.shape}")
    rows, cols = w.shape
    n_groups = math.ceil(cols / group_size)
    scales = np.empty((rows, n_groups), dtype=np.float32)
    codes = np.empty((rows, cols), dtype=np.int8)
    w64 = w.astype(np.float64)
    for g in range(n_groups):
        lo, hi = g * group_size, min((g + 1) * group_size, cols)
        block = w64[:, lo:hi]
        peak = np.max(np.abs(block), axis=1)
        s32 = np.where(peak > 0.0, (peak / 7.0).astype(np.float32), np.float32(1.0))
        codes[:, lo:hi] = np.clip(_round_half_away(block / s32.astype(np.float64)[:, None]), -7, 7).astype(np.int8)
        scales[:, g] = s32
    return QuantizedMatrix((rows, cols), group_size, scales, pack_nibbles(codes))


def qmatmul(qw: QuantizedMatrix, x: Tensor) -> Tensor:
    """matmul(dequantize(qw), x); reference semantics for the INT4 path."""
    if x.shape[0] != qw.shape[1]:
        raise DimensionError(f"qmatmul: quantized {qw.shape} x input {x.shape}")
    return Tensor(matmul_np(qw.dequantize(), x.a.astype(np.float32)))


class QuantizedBundle:
    """Whole-model quantization result.

    ``float_weights`` carries the tensors kept in float, ``qweights`` the
    INT4 matrices. ``adapter`` is retained only under the
    keep-adapter-float policy and is applied at runtime in float.
    """

    def __init__(self, config: ModelConfig, float_weights: dict[str, Tensor],
                 qweights: dict[str, QuantizedMatrix], policy: QuantPolicy,
                 adapter: LoraAdapter | None = None):
        self.config = config
        self.float_weights = float_weights
        self.qweights = qweights
        self.policy = policy
        self.adapter = adapter

    def to_bundle(self) -> ModelBundle:
        """Dequantized ModelBundle (reference semantics for inference)."""
        weights = dict(self.float_weights)
        for name, qm in self.qweights.items():
            weights[name] = Tensor(qm.dequantize())
        return ModelBundle(self.config, weights)

    def runtime_adapters(self):
        return self.adapter if self.policy is QuantPolicy.QUANT_BASE_KEEP_ADAPTER_FLOAT else None

    def footprint_report(self) -> dict:
        """Exact byte accounting for the quantized tensors vs float32."""
        q_bytes = sum(qm.nbytes() for qm in self.qweights.values())
        q_elems = sum(qm.shape[0] * qm.shape[1] for qm in self.qweights.values())
        float_equiv = q_elems * 4
        kept_bytes = sum(w.a.nbytes for w in self.float_weights.values())
        return {
            "quantized_tensors": len(self.qweights),
            "quantized_bytes": q_bytes,
            "float32_equivalent_bytes": float_equiv,
            "reduction_factor": float_equiv / q_bytes if q_bytes else 0.0,
            "float_kept_bytes": kept_bytes,
        }


def _is_quantizable(name: str) -> bool:
    if name in _FLOAT_KEEP_NAMES:
        return False
    return not any(name.endswith(suf) for suf in _FLOAT_KEEP_SUFFIXES)


def quantize_model(bundle: ModelBundle, adapter: LoraAdapter | None = None,
                   policy: QuantPolicy = QuantPolicy.MERGE_THEN_QUANTIZE,
                   group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedBundle:
    """Quantize all projection/feed-forward weights under the given policy.

    Merge-then-quantize folds the adapter delta into the base before
    quantizing; keep-adapter-float quantizes the raw base and keeps the
    adapter for float application at runtime.
    """
    if policy is QuantPolicy.MERGE_THEN_QUANTIZE and adapter is None:
        raise ConfigurationError("policy", "merge-then-quantize requires an adapter")
    source = merge_lora(bundle, adapter) if policy is QuantPolicy.MERGE_THEN_QUANTIZE else bundle
    float_weights: dict[str, Tensor] = {}
    qweights: dict[str, QuantizedMatrix] = {}
    for name, w in source.weights.items():
        if _is_quantizable(name):
            qweights[name] = quantize_matrix(w.a, group_size)
        else:
            float_weights[name] = w
    kept = adapter if policy is QuantPolicy.QUANT_BASE_KEEP_ADAPTER_FLOAT else None
    return QuantizedBundle(source.config, float_weights, qweights, policy, kept)


def policy_divergence(bundle: ModelBundle, adapter: LoraAdapter, token_seqs,
                      group_size: int = DEFAULT_GROUP_SIZE) -> float:
    """Mean abs next-token logit difference between the two policies."""
    from .model import forward

    merged = quantize_model(bundle, adapter, QuantPolicy.MERGE_THEN_QUANTIZE, group_size)
    kept = quantize_model(bundle, adapter, QuantPolicy.QUANT_BASE_KEEP_ADAPTER_FLOAT, group_size)
    bm, bk = merged.to_bundle(), kept.to_bundle()
    diffs = []
    for seq in token_seqs:
        lm = forward(bm, seq, merged.runtime_adapters()).a
        lk = forward(bk, seq, kept.runtime_adapters()).a
        diffs.append(np.abs(lm.astype(np.float64) - lk.astype(np.float64)).mean())
    return float(np.mean(diffs))


def save_quantized(qb: QuantizedBundle, path) -> None:
    meta = {
        "config": qb.config.to_dict(),
        "policy": qb.policy.value,
        "quantized": sorted(qb.qweights),
        "group_size": {name: qm.group_size for name, qm in sorted(qb.qweights.items())},
    }
    with open(path, "wb") as f:
        write_header(f, QUANT_MAGIC, QUANT_VERSION, meta)
        records: list[tuple[str, np.ndarray]] = []
        for name in sorted(qb.float_weights):
            records.append((f"float:{name}", qb.float_weights[name].a))
        for name in sorted(qb.qweights):
            qm = qb.qweights[name]
            records.append((f"scales:{name}", qm.scales))
            records.append((f"codes:{name}", qm.packed))
        write_record_count(f, len(records))
        for name, arr in records:
            write_tensor_record(f, name, arr)


def load_quantized(path) -> QuantizedBundle:
    with open(path, "rb") as f:
        meta = read_header(f, QUANT_MAGIC, QUANT_VERSION)
        config = ModelConfig.from_dict(meta["config"])
        policy = QuantPolicy(meta["policy"])
        group_sizes = {k: int(v) for k, v in meta.get("group_size", {}).items()}
        n = read_record_count(f)
        raw: dict[str, np.ndarray] = {}
        for _ in range(n):
            name, arr = read_tensor_record(f)
            raw[name] = arr
        if f.read(1):
            raise CorruptFileError("trailing bytes after final tensor record")

    float_weights: dict[str, Tensor] = {}
    qweights: dict[str, QuantizedMatrix] = {}
    shapes = canonical_weight_shapes(config)
    for name in meta["quantized"]:
        try:
            scales = raw[f"scales:{name}"]
            packed = raw[f"codes:{name}"]
        except KeyError as exc:
            raise CorruptFileError(f"quantized file lacks record {exc}") from exc
        shape = shapes[name]
        qweights[name] = QuantizedMatrix(shape, group_sizes[name], scales, packed)
    for key, arr in raw.items():
        if key.startswith("float:"):
            float_weights[key[len("float:"):]] = Tensor(arr)
    return QuantizedBundle(config, float_weights, qweights, policy)
