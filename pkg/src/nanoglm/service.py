"""Deployment layer: sessions, the generation pipeline, streaming delivery,
persistence, and metering.

Pipeline per message: prompt designer -> context-window assembly (oldest
whole turns dropped first) -> token-by-token generation with the session's
sampler settings -> repetition metrics. Responses that trip the repetition
detector are flagged, never blocked.

Persistence is an append-only line-delimited event log per day; restarting
a service on the same directory replays the log and reconstructs every
session history exactly.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from .errors import ConfigurationError, NotFoundError
from .generation import stream_generate
from .model import ModelBundle, normalize_adapters
from .prompt import DEFAULT_TEMPLATE, KnowledgeLibrary, design_prompt, validate_template
from .sampling import SamplerConfig
from .train import detect_degenerate

logger = logging.getLogger(__name__)

SAMPLER_FIELDS = ("temperature", "top_p", "seed", "max_new_tokens")


@dataclass
class Message:
    role: str  # "user" | "assistant"
    text: str
    ts: str


@dataclass
class ChatSession:
    session_id: str
    overrides: dict = field(default_factory=dict)
    history: list[Message] = field(default_factory=list)
    rng_state: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def turns(self) -> list[tuple[str, str]]:
        pairs = []
        for i in range(0, len(self.history) - 1, 2):
            pairs.append((self.history[i].text, self.history[i + 1].text))
        return pairs


@dataclass
class ServiceMetrics:
    pairs_served: int
    window_seconds: float
    pairs_per_hour: float
    repetition_flags: int
    latency_mean_s: float
    latency_max_s: float

    def to_dict(self) -> dict:
        return {
            "pairs_served": self.pairs_served,
            "window_seconds": self.window_seconds,
            "pairs_per_hour": self.pairs_per_hour,
            "repetition_flags": self.repetition_flags,
            "latency_mean_s": self.latency_mean_s,
            "latency_max_s": self.latency_max_s,
        }


class EventLog:
    """Append-only daily JSONL event log with a single exclusive writer."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path_for_today(self) -> Path:
        return self.dir / f"events-{_dt.date.today().isoformat()}.jsonl"

    def append(self, event: dict) -> None:
        line = json.dumps(event, ensure_ascii=False)
        with self._lock:
            with open(self._path_for_today(), "a", encoding="utf-8") as f:
                f.write(line + "\n")
                f.flush()

    def read_all(self) -> list[dict]:
        events = []
        for path in sorted(self.dir.glob("events-*.jsonl")):
            with open(path, "r", encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        events.append(json.loads(line))
                    except json.JSONDecodeError:
                        logger.warning("skipping corrupt event line in %s", path)
        return events


def _now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def merge_sampler_config(base: SamplerConfig, *override_dicts) -> SamplerConfig:
    """Apply override dicts in order; validation errors name the field."""
    values = {
        "temperature": base.temperature,
        "top_p": base.top_p,
        "seed": base.seed,
        "max_new_tokens": base.max_new_tokens,
    }
    for overrides in override_dicts:
        if not overrides:
            continue
        for key, val in overrides.items():
            if key not in SAMPLER_FIELDS:
                raise ConfigurationError(key, "unknown sampler field")
            if val is None:
                continue
            values[key] = val
    try:
        temperature = float(values["temperature"])
        top_p = float(values["top_p"])
        seed = int(values["seed"])
        max_new = int(values["max_new_tokens"])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("sampler", f"non-numeric value: {exc}") from exc
    return SamplerConfig(temperature=temperature, top_p=top_p, seed=seed, max_new_tokens=max_new)


class ChatService:
    def __init__(self, bundle: ModelBundle, adapters=None, library: KnowledgeLibrary | None = None,
                 template: str = DEFAULT_TEMPLATE, sampler_defaults: SamplerConfig | None = None,
                 persist_dir: str | Path | None = None, model_info: dict | None = None):
        validate_template(template)
        self.bundle = bundle
        self.adapters = normalize_adapters(adapters)
        self.library = library
        self.template = template
        self.sampler_defaults = sampler_defaults or SamplerConfig()
        self.model_info = model_info or {}
        self._sessions: dict[str, ChatSession] = {}
        self._lock = threading.RLock()
        self._metrics_lock = threading.Lock()
        self._pairs = 0
        self._flagged = 0
        self._latencies: list[float] = []
        self._started = time.monotonic()
        self.log = EventLog(persist_dir) if persist_dir is not None else None
        if self.log is not None:
            self._replay()

    # -- sessions ----------------------------------------------------------

    def create_session(self, overrides: dict | None = None) -> ChatSession:
        overrides = dict(overrides or {})
        merged = merge_sampler_config(self.sampler_defaults, overrides)  # validate now
        with self._lock:
            sid = uuid.uuid4().hex
            session = ChatSession(session_id=sid, overrides=overrides, rng_state=merged.seed)
            self._sessions[sid] = session
        if self.log is not None:
            self.log.append({"type": "session", "ts": _now_iso(), "session_id": sid,
                             "overrides": overrides})
        return session

    def get_session(self, session_id: str) -> ChatSession:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise NotFoundError(f"no session {session_id!r}")
        return session

    def session_ids(self) -> list[str]:
        with self._lock:
            return list(self._sessions)

    # -- generation --------------------------------------------------------

    def _assemble_prompt_ids(self, session: ChatSession, final_prompt: str,
                             max_new_tokens: int) -> tuple[list[int], bool]:
        tok = self.bundle.tokenizer
        _, prefix = self.adapters
        p = prefix.prefix_len if prefix is not None else 0
        budget = self.bundle.config.max_seq_len - p - max_new_tokens
        if budget < 2:
            raise ConfigurationError(
                "max_new_tokens", f"leaves no prompt room in max_seq_len={self.bundle.config.max_seq_len}")
        current = tok.encode(final_prompt) + [tok.sep_id]
        kept: list[list[int]] = []
        total = 1 + len(current)
        # Newest turns first; a turn either fits whole or is dropped.
        for user_text, assistant_text in reversed(session.turns()):
            turn = tok.encode(user_text) + [tok.sep_id] + tok.encode(assistant_text) + [tok.eos_id]
            if total + len(turn) <= budget:
                kept.insert(0, turn)
                total += len(turn)
            else:
                break
        ids = [tok.bos_id]
        for turn in kept:
            ids.extend(turn)
        ids.extend(current)
        overflow_input = False
        if len(ids) > budget:
            ids = [tok.bos_id] + ids[-(budget - 1):] if budget > 1 else [tok.bos_id]
            overflow_input = True
        return ids, overflow_input

    def post_message(self, session_id: str, text: str, overrides: dict | None = None,
                     debug: bool = False) -> Iterator[dict]:
        """Yield ``token`` events then one ``done`` event for this message."""
        session = self.get_session(session_id)
        cfg = merge_sampler_config(self.sampler_defaults, session.overrides, overrides or {})

        session.lock.acquire()
        try:
            designed = None
            final_prompt = text
            matched: tuple[str, ...] = ()
            if self.library is not None:
                designed = design_prompt(text, self.library, self.template)
                final_prompt = designed.final_prompt
                matched = designed.matched_doc_ids

            prompt_ids, overflow_input = self._assemble_prompt_ids(session, final_prompt, cfg.max_new_tokens)
            t0 = time.monotonic()
            result = None
            index = 0
            for token, delta, final in stream_generate(self.bundle, self.adapters, prompt_ids, cfg,
                                                       session.rng_state):
                if final is not None:
                    result = final
                    break
                yield {"event": "token", "data": {"session_id": session_id, "index": index, "text": delta}}
                index += 1
            latency = time.monotonic() - t0
            assert result is not None
            session.rng_state = result.rng_state

            rep = detect_degenerate([result.token_ids])
            ts = _now_iso()
            session.history.append(Message("user", text, ts))
            session.history.append(Message("assistant", result.text, ts))
            session.prompt_tokens += len(prompt_ids)
            session.completion_tokens += len(result.token_ids)

            with self._metrics_lock:
                self._pairs += 1
                if rep.degenerate:
                    self._flagged += 1
                self._latencies.append(latency)
                if len(self._latencies) > 1000:
                    self._latencies = self._latencies[-1000:]

            done = {
                "session_id": session_id,
                "text": result.text,
                "token_count": len(result.token_ids),
                "finish_reason": result.finish_reason,
                "overflow": result.overflow or overflow_input,
                "repetition_flagged": rep.degenerate,
                "repetition_ratio": rep.repetition_ratio,
                "matched_doc_ids": list(matched),
                "latency_s": latency,
            }
            if matched and designed is not None:
                done["context_block"] = designed.context_block
            if debug and designed is not None:
                done["designed_prompt"] = designed.final_prompt

            if self.log is not None:
                self.log.append({
                    "type": "message", "ts": ts, "session_id": session_id,
                    "user_text": text, "assistant_text": result.text,
                    "sampler": {"temperature": cfg.temperature, "top_p": cfg.top_p,
                                "seed": cfg.seed, "max_new_tokens": cfg.max_new_tokens},
                    "repetition_flagged": rep.degenerate,
                    "matched_doc_ids": list(matched),
                    "token_count": len(result.token_ids),
                })
            yield {"event": "done", "data": done}
        finally:
            session.lock.release()

    # -- metrics & persistence ----------------------------------------------

    def metrics(self) -> ServiceMetrics:
        with self._metrics_lock:
            pairs = self._pairs
            flagged = self._flagged
            lat = list(self._latencies)
        window = time.monotonic() - self._started
        per_hour = pairs / (window / 3600.0) if window > 0 else 0.0
        return ServiceMetrics(
            pairs_served=pairs,
            window_seconds=window,
            pairs_per_hour=per_hour,
            repetition_flags=flagged,
            latency_mean_s=sum(lat) / len(lat) if lat else 0.0,
            latency_max_s=max(lat) if lat else 0.0,
        )

    def snapshot_metrics(self) -> None:
        if self.log is not None:
            self.log.append({"type": "metrics", "ts": _now_iso(), "metrics": self.metrics().to_dict()})

    def _replay(self) -> None:
        for event in self.log.read_all():
            kind = event.get("type")
            if kind == "session":
                sid = event["session_id"]
                overrides = event.get("overrides") or {}
                try:
                    merged = merge_sampler_config(self.sampler_defaults, overrides)
                except ConfigurationError:
                    logger.warning("replay: session %s has invalid overrides; using defaults", sid)
                    overrides, merged = {}, self.sampler_defaults
                self._sessions[sid] = ChatSession(session_id=sid, overrides=overrides,
                                                  rng_state=merged.seed)
            elif kind == "message":
                session = self._sessions.get(event.get("session_id"))
                if session is None:
                    logger.warning("replay: message for unknown session %s", event.get("session_id"))
                    continue
                ts = event.get("ts", _now_iso())
                session.history.append(Message("user", event["user_text"], ts))
                session.history.append(Message("assistant", event["assistant_text"], ts))
        if self._sessions:
            logger.info("replayed %d session(s) from event log", len(self._sessions))


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------


def sse_format(event: dict) -> str:
    return f"event: {event['event']}\ndata: {json.dumps(event['data'], ensure_ascii=False)}\n\n"


def build_app(service: ChatService) -> FastAPI:
    app = FastAPI(title="nanoglm chat service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(NotFoundError)
    async def _not_found(_req, exc):
        return JSONResponse(status_code=404, content={"error": str(exc)})

    @app.exception_handler(ConfigurationError)
    async def _bad_config(_req, exc):
        return JSONResponse(status_code=400, content={"error": str(exc), "field": exc.field})

    @app.get("/v1/health")
    def health():
        info = {"status": "ok", "config": service.bundle.config.to_dict()}
        info.update(service.model_info)
        info["library_docs"] = len(service.library) if service.library is not None else 0
        return info

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        body = await request.json() if await _has_body(request) else {}
        session = service.create_session(body.get("sampler") or _pick_sampler_fields(body))
        effective = merge_sampler_config(service.sampler_defaults, session.overrides)
        return {"session_id": session.session_id,
                "sampler": {"temperature": effective.temperature, "top_p": effective.top_p,
                            "seed": effective.seed, "max_new_tokens": effective.max_new_tokens}}

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        session = service.get_session(session_id)
        return {
            "session_id": session.session_id,
            "overrides": session.overrides,
            "history": [{"role": m.role, "text": m.text, "ts": m.ts} for m in session.history],
            "prompt_tokens": session.prompt_tokens,
            "completion_tokens": session.completion_tokens,
        }

    @app.post("/v1/sessions/{session_id}/messages")
    async def post_message(session_id: str, request: Request):
        body = await request.json()
        text = body.get("text")
        if not isinstance(text, str) or not text:
            raise ConfigurationError("text", "must be a nonempty string")
        overrides = body.get("sampler") or _pick_sampler_fields(body)
        debug = bool(body.get("debug", False))
        service.get_session(session_id)  # 404 before the stream starts
        merge_sampler_config(service.sampler_defaults, overrides or {})  # 400 before the stream starts

        def event_stream():
            for event in service.post_message(session_id, text, overrides, debug):
                yield sse_format(event)

        return StreamingResponse(event_stream(), media_type="text/event-stream")

    @app.get("/v1/metrics")
    def metrics():
        return service.metrics().to_dict()

    return app


def _pick_sampler_fields(body: dict) -> dict:
    return {k: body[k] for k in SAMPLER_FIELDS if k in body}


async def _has_body(request) -> bool:
    raw = await request.body()
    return bool(raw)
