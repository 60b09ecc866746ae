"""Fine-tuning engine.

Masked cross-entropy over question/answer pairs, reverse-mode gradients for
adapter parameters only (base weights stay frozen), the Lion optimizer, and
a checkpointed training loop with collapse probes.

The backward pass below mirrors the forward in :mod:`nanoglm.model` step for
step. It propagates activation gradients through every block but only
*accumulates* into adapter tensors (LoRA A/B, prefix K/V); correctness is
pinned by central finite differences in the test suite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adapters import save_adapter
from .errors import ConfigurationError, DegenerateExampleError, DimensionError, SequenceLengthError
from .model import (
    LN_EPS,
    ModelBundle,
    gelu_grad_np,
    gelu_np,
    merge_heads,
    normalize_adapters,
    split_heads,
)
from .rng import Rng
from .tensor import softmax_np

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 2e-5
    epochs: int = 1
    max_seq_len: int = 512
    max_target_len: int = 100
    lion_beta1: float = 0.9
    lion_beta2: float = 0.99
    weight_decay: float = 0.0
    warmup_steps: int = 0
    probe_interval: int = 500
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "epochs", "max_seq_len", "max_target_len"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(name, "must be positive")
        if self.max_target_len > self.max_seq_len:
            raise ConfigurationError("max_target_len", "must not exceed max_seq_len")
        if self.probe_interval <= 0:
            raise ConfigurationError("probe_interval", "must be positive")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay", "must be >= 0")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(m={k: np.zeros_like(v) for k, v in params.items()})


def lion_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig,
              lr: float | None = None) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One Lion update, in place.

    u = sign(b1*m + (1-b1)*g);  p -= lr*(u + wd*p);  m = b2*m + (1-b2)*g
    """
    if lr is None:
        lr = config.learning_rate
    b1, b2, wd = config.lion_beta1, config.lion_beta2, config.weight_decay
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise DimensionError(f"lion: grad shape {g.shape} != param shape {p.shape} for {key}")
        m = state.m[key]
        update = np.sign(b1 * m + (1.0 - b1) * g)
        p -= (lr * (update + wd * p)).astype(p.dtype)
        state.m[key] = (b2 * m + (1.0 - b2) * g).astype(p.dtype)
    state.step += 1
    return params, state


# ---------------------------------------------------------------------------
# forward with tape + backward
# ---------------------------------------------------------------------------


def _ln_forward(x, g, b):
    mean = x.mean(-1, keepdims=True)
    var = ((x - mean) ** 2).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return xhat * g + b, xhat, inv


def _ln_backward(dy, xhat, inv, g):
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _tape_forward(bundle: ModelBundle, lora, prefix, tokens: Sequence[int]):
    """Full-sequence forward retaining the intermediates backward needs."""
    cfg = bundle.config
    dt = bundle.precision.dtype
    p = prefix.prefix_len if prefix is not None else 0
    t = len(tokens)
    if p + t > cfg.max_seq_len:
        raise SequenceLengthError(f"{t} tokens plus prefix {p} exceeds max_seq_len={cfg.max_seq_len}")

    ids = np.asarray(tokens, dtype=np.int64)
    x = (bundle.w("embed")[ids] + bundle.w("pos")[:t]).astype(dt, copy=True)

    h = cfg.n_heads
    inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)
    col = np.arange(p + t)
    blocked = col[None, :] > (p + np.arange(t))[:, None]

    layers = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        rec: dict = {"x_in": x}
        n1, xhat1, inv1 = _ln_forward(x, bundle.w(f"{pre}.attn_norm.g"), bundle.w(f"{pre}.attn_norm.b"))
        rec.update(n1=n1, xhat1=xhat1, inv1=inv1)

        q = n1 @ bundle.w(f"{pre}.attn.q").T
        lq = lora.piece(i, "q") if lora else None
        if lq is not None:
            a, b, s = lq
            uq = n1 @ a.T
            q = q + s * (uq @ b.T)
            rec["uq"] = uq
        k = n1 @ bundle.w(f"{pre}.attn.k").T
        v = n1 @ bundle.w(f"{pre}.attn.v").T
        lv = lora.piece(i, "v") if lora else None
        if lv is not None:
            a, b, s = lv
            uv = n1 @ a.T
            v = v + s * (uv @ b.T)
            rec["uv"] = uv

        if p > 0:
            kp, vp = prefix.prefix_kv(i)
            k_full = np.vstack([kp.astype(dt), k])
            v_full = np.vstack([vp.astype(dt), v])
        else:
            k_full, v_full = k, v

        qh = split_heads(q, h)
        kh = split_heads(k_full, h)
        vh = split_heads(v_full, h)
        scores = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt
        scores[:, blocked] = -np.inf
        att = softmax_np(scores, axis=-1)
        ctx = merge_heads(att @ vh)
        x = x + ctx @ bundle.w(f"{pre}.attn.o").T
        rec.update(qh=qh, kh=kh, vh=vh, att=att, x_mid=x)

        n2, xhat2, inv2 = _ln_forward(x, bundle.w(f"{pre}.ff_norm.g"), bundle.w(f"{pre}.ff_norm.b"))
        h1 = n2 @ bundle.w(f"{pre}.ff.in").T
        x = x + gelu_np(h1) @ bundle.w(f"{pre}.ff.out").T
        rec.update(xhat2=xhat2, inv2=inv2, h1=h1)
        layers.append(rec)

    nf, xhatf, invf = _ln_forward(x, bundle.w("final_norm.g"), bundle.w("final_norm.b"))
    logits = nf @ bundle.w("lm_head").T
    tape = {"layers": layers, "xhatf": xhatf, "invf": invf, "prefix_len": p}
    return logits, tape


def _tape_backward(bundle: ModelBundle, lora, prefix, dlogits: np.ndarray, tape: dict) -> dict[str, np.ndarray]:
    cfg = bundle.config
    p = tape["prefix_len"]
    h = cfg.n_heads
    inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)

    grads: dict[str, np.ndarray] = {}
    if lora is not None:
        for key, arr in lora.params().items():
            grads[key] = np.zeros_like(arr)
    if prefix is not None:
        for key, arr in prefix.params().items():
            grads[key] = np.zeros_like(arr)

    dnf = dlogits @ bundle.w("lm_head")
    dx = _ln_backward(dnf, tape["xhatf"], tape["invf"], bundle.w("final_norm.g"))

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}"
        rec = tape["layers"][i]

        # x_next = x_mid + gelu(h1) @ Wout.T
        dh2 = dx @ bundle.w(f"{pre}.ff.out")
        dh1 = dh2 * gelu_grad_np(rec["h1"])
        dn2 = dh1 @ bundle.w(f"{pre}.ff.in")
        dx = dx + _ln_backward(dn2, rec["xhat2"], rec["inv2"], bundle.w(f"{pre}.ff_norm.g"))

        # x_mid = x_in + merge(att @ vh) @ Wo.T
        dctx = dx @ bundle.w(f"{pre}.attn.o")
        dctxh = split_heads(dctx, h)
        att, vh, qh, kh = rec["att"], rec["vh"], rec["qh"], rec["kh"]
        datt = dctxh @ vh.transpose(0, 2, 1)
        dvh = att.transpose(0, 2, 1) @ dctxh
        dscores = att * (datt - (datt * att).sum(-1, keepdims=True))
        dqh = (dscores @ kh) * inv_sqrt
        dkh = (dscores.transpose(0, 2, 1) @ qh) * inv_sqrt

        dq = merge_heads(dqh)
        dk_full = merge_heads(dkh)
        dv_full = merge_heads(dvh)
        if p > 0:
            grads[f"layers.{i}.prefix.k"] += dk_full[:p]
            grads[f"layers.{i}.prefix.v"] += dv_full[:p]
            dk, dv = dk_full[p:], dv_full[p:]
        else:
            dk, dv = dk_full, dv_full

        n1 = rec["n1"]
        dn1 = dq @ bundle.w(f"{pre}.attn.q") + dk @ bundle.w(f"{pre}.attn.k") + dv @ bundle.w(f"{pre}.attn.v")
        lq = lora.piece(i, "q") if lora else None
        if lq is not None:
            a, b, s = lq
            duq = s * (dq @ b)
            grads[f"layers.{i}.q.A"] += duq.T @ n1
            grads[f"layers.{i}.q.B"] += s * (dq.T @ rec["uq"])
            dn1 += duq @ a
        lv = lora.piece(i, "v") if lora else None
        if lv is not None:
            a, b, s = lv
            duv = s * (dv @ b)
            grads[f"layers.{i}.v.A"] += duv.T @ n1
            grads[f"layers.{i}.v.B"] += s * (dv.T @ rec["uv"])
            dn1 += duv @ a

        dx = dx + _ln_backward(dn1, rec["xhat1"], rec["inv1"], bundle.w(f"{pre}.attn_norm.g"))

    return grads


# ---------------------------------------------------------------------------
# QA loss
# ---------------------------------------------------------------------------


def build_qa_tokens(bundle: ModelBundle, question_ids: Sequence[int], answer_ids: Sequence[int],
                    max_seq_len: int = 512, max_target_len: int = 100):
    """Assemble [BOS] q [SEP] a [EOS]; return (input_ids, positions, targets).

    ``positions[j]`` indexes the input token whose next-token prediction is
    scored; ``targets[j]`` is the answer token (or EOS) it must predict.
    """
    tok = bundle.tokenizer
    if len(answer_ids) == 0:
        raise DegenerateExampleError("answer is empty")
    a = list(answer_ids)
    if len(a) > max_target_len:
        logger.warning("answer of %d tokens truncated to max_target_len=%d", len(a), max_target_len)
        a = a[:max_target_len]
    q = list(question_ids)
    budget_q = max_seq_len - 3 - len(a)
    if budget_q < 0:
        raise SequenceLengthError(f"answer of {len(a)} tokens cannot fit max_seq_len={max_seq_len}")
    if len(q) > budget_q:
        logger.warning("question of %d tokens truncated to %d to fit max_seq_len", len(q), budget_q)
        q = q[:budget_q]
    tokens = [tok.bos_id] + q + [tok.sep_id] + a + [tok.eos_id]
    n_pre = 2 + len(q)
    inputs = tokens[:-1]
    positions = np.arange(n_pre - 1, len(inputs))
    targets = np.asarray(tokens[n_pre:], dtype=np.int64)
    return inputs, positions, targets


def masked_ce(logits: np.ndarray, positions: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over the selected positions; returns (loss, dlogits)."""
    sel = logits[positions].astype(np.float64)
    shifted = sel - sel.max(-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(-1, keepdims=True))
    logp = shifted - logz
    n = len(positions)
    loss = -logp[np.arange(n), targets].mean()
    dsel = np.exp(logp)
    dsel[np.arange(n), targets] -= 1.0
    dsel /= n
    dlogits = np.zeros_like(logits, dtype=np.float64)
    dlogits[positions] = dsel
    return float(loss), dlogits


def qa_loss(bundle: ModelBundle, adapter, question_ids: Sequence[int], answer_ids: Sequence[int],
            max_seq_len: int = 512, max_target_len: int = 100, need_grads: bool = True):
    """Masked QA cross-entropy and gradients w.r.t. adapter parameters only."""
    lora, prefix = normalize_adapters(adapter)
    p = prefix.prefix_len if prefix is not None else 0
    inputs, positions, targets = build_qa_tokens(
        bundle, question_ids, answer_ids, max_seq_len=min(max_seq_len, bundle.config.max_seq_len - p),
        max_target_len=max_target_len)
    logits, tape = _tape_forward(bundle, lora, prefix, inputs)
    loss, dlogits = masked_ce(logits, positions, targets)
    if not need_grads:
        return loss, None
    grads = _tape_backward(bundle, lora, prefix, dlogits.astype(logits.dtype), tape)
    return loss, grads


def corpus_loss(bundle: ModelBundle, adapter, pairs, config: TrainConfig) -> float:
    """Mean qa_loss over an encoded corpus (no gradients)."""
    total = 0.0
    for q_ids, a_ids in pairs:
        loss, _ = qa_loss(bundle, adapter, q_ids, a_ids,
                          max_seq_len=config.max_seq_len, max_target_len=config.max_target_len,
                          need_grads=False)
        total += loss
    return total / len(pairs)


def perplexity(bundle: ModelBundle, adapter, corpus, config: TrainConfig | None = None) -> float:
    """exp of the mean answer-token cross-entropy over a corpus."""
    config = config or TrainConfig()
    pairs = _encode_corpus(bundle, corpus)
    return math.exp(corpus_loss(bundle, adapter, pairs, config))


# ---------------------------------------------------------------------------
# degeneration probes
# ---------------------------------------------------------------------------


@dataclass
class DegenerateReport:
    degenerate: bool
    repetition_ratio: float
    mean_length: float
    per_text: list[float] = field(default_factory=list)


def sequence_repetition_ratio(seq: Sequence) -> float:
    """1 - distinct 4-grams / total 4-grams; 0 for sequences shorter than 4."""
    total = len(seq) - 3
    if total <= 0:
        return 0.0
    grams = {tuple(seq[i : i + 4]) for i in range(total)}
    return 1.0 - len(grams) / total


def detect_degenerate(sequences: Sequence[Sequence], min_len: float = 8.0,
                      max_rep_ratio: float = 0.5) -> DegenerateReport:
    """Flag collapsed output: too short on average, or dominated by repeats.

    Items are tokens at the caller's granularity (byte-token ids for model
    output, words for plain text).
    """
    if not sequences:
        return DegenerateReport(True, 0.0, 0.0, [])
    ratios = [sequence_repetition_ratio(s) for s in sequences]
    mean_ratio = sum(ratios) / len(ratios)
    mean_len = sum(len(s) for s in sequences) / len(sequences)
    flag = mean_len < min_len or mean_ratio > max_rep_ratio
    return DegenerateReport(flag, mean_ratio, mean_len, ratios)


@dataclass
class ProbeOutput:
    prompt: str
    text: str
    token_ids: list[int]


@dataclass
class ProbeReport:
    step: int
    outputs: list[ProbeOutput]
    degenerate: bool
    repetition_ratio: float
    mean_output_length: float
    eval_loss: float | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "outputs": [{"prompt": o.prompt, "output": o.text, "tokens": len(o.token_ids)} for o in self.outputs],
            "degenerate": self.degenerate,
            "repetition_ratio": self.repetition_ratio,
            "mean_output_length": self.mean_output_length,
            "eval_loss": self.eval_loss,
        }


# One in-domain question and one general-knowledge question, mirroring the
# iteration-study probes.
DEFAULT_PROBE_PROMPTS = ("感冒了应该怎么办？", "What is the capital of France?")

PROBE_MAX_NEW_TOKENS = 48


def _default_generate(bundle: ModelBundle, adapter, prompt: str) -> list[int]:
    from .generation import generate
    from .sampling import SamplerConfig

    cfg = SamplerConfig(temperature=0.0, max_new_tokens=PROBE_MAX_NEW_TOKENS)
    result, _ = generate(bundle, adapter, prompt, cfg, rng_state=0)
    return result.token_ids


def run_probes(bundle: ModelBundle, adapter, prompts: Sequence[str], step: int,
               min_len: float = 8.0, max_rep_ratio: float = 0.5,
               generate_fn: Callable | None = None) -> ProbeReport:
    """Greedy-decode every probe prompt and score the outputs for collapse.

    ``generate_fn(bundle, adapter, prompt) -> token ids`` may be injected to
    probe a scripted checkpoint.
    """
    gen = generate_fn or _default_generate
    outputs = []
    for prompt in prompts:
        ids = list(gen(bundle, adapter, prompt))
        outputs.append(ProbeOutput(prompt, bundle.tokenizer.decode(ids), ids))
    report = detect_degenerate([o.token_ids for o in outputs], min_len, max_rep_ratio)
    return ProbeReport(step, outputs, report.degenerate, report.repetition_ratio, report.mean_length)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    adapter: object
    reports: list[ProbeReport]
    losses: list[float]
    checkpoints: list[Path]
    aborted: bool
    steps: int


def _encode_corpus(bundle: ModelBundle, corpus) -> list[tuple[list[int], list[int]]]:
    tok = bundle.tokenizer
    pairs = []
    for item in corpus:
        if hasattr(item, "question"):
            q, a = item.question, item.answer
        else:
            q, a = item
        pairs.append((tok.encode(q), tok.encode(a)))
    return pairs


def _restore(adapter, snapshot) -> None:
    src = snapshot.params()
    for key, arr in adapter.params().items():
        arr[:] = src[key]


def train(bundle: ModelBundle, adapter, corpus, config: TrainConfig,
          out_dir: str | Path | None = None,
          probe_prompts: Sequence[str] = DEFAULT_PROBE_PROMPTS) -> TrainResult:
    """Adapter-only fine-tuning. Deterministic for a fixed seed and config.

    Checkpoints (NGLA) and probe reports are emitted every
    ``config.probe_interval`` steps. A non-finite loss aborts the run and
    restores the adapter from the last good checkpoint.
    """
    if not corpus:
        raise ConfigurationError("corpus", "must be nonempty")
    pairs = _encode_corpus(bundle, corpus)
    params = adapter.params()
    opt = init_optimizer(params)
    rng = Rng(config.seed)

    total_steps = config.max_steps
    if total_steps is None:
        total_steps = max(1, math.ceil(config.epochs * len(pairs) / config.batch_size))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        probe_log = open(out_path / "probes.jsonl", "a", encoding="utf-8")
    else:
        probe_log = None

    losses: list[float] = []
    reports: list[ProbeReport] = []
    checkpoints: list[Path] = []
    last_good = adapter.copy()
    aborted = False
    queue: list[int] = []

    try:
        for step in range(1, total_steps + 1):
            batch = []
            for _ in range(config.batch_size):
                if not queue:
                    queue = list(range(len(pairs)))
                    rng.shuffle(queue)
                batch.append(queue.pop())

            loss_sum = 0.0
            acc: dict[str, np.ndarray] | None = None
            for idx in batch:
                q_ids, a_ids = pairs[idx]
                loss, grads = qa_loss(bundle, adapter, q_ids, a_ids,
                                      max_seq_len=config.max_seq_len,
                                      max_target_len=config.max_target_len)
                loss_sum += loss
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            step_loss = loss_sum / len(batch)
            losses.append(step_loss)

            if not math.isfinite(step_loss):
                logger.error("non-finite loss at step %d; aborting and restoring last good checkpoint", step)
                _restore(adapter, last_good)
                aborted = True
                break

            for k in acc:
                acc[k] /= len(batch)
            lr = config.learning_rate
            if config.warmup_steps > 0:
                lr *= min(1.0, step / config.warmup_steps)
            lion_step(params, acc, opt, config, lr=lr)

            if step % config.probe_interval == 0:
                report = run_probes(bundle, adapter, probe_prompts, step)
                report.eval_loss = corpus_loss(bundle, adapter, pairs, config)
                reports.append(report)
                last_good = adapter.copy()
                if out_path is not None:
                    ckpt = out_path / f"ckpt-{step:06d}.ngla"
                    save_adapter(adapter, ckpt)
                    checkpoints.append(ckpt)
                    probe_log.write(json.dumps(report.to_dict(), ensure_ascii=False) + "\n")
                    probe_log.flush()
    finally:
        if probe_log is not None:
            probe_log.close()

    return TrainResult(adapter, reports, losses, checkpoints, aborted, len(losses))
