"""QA corpus ingestion and the translation-distillation pipeline.

QA corpora are line-delimited JSON records (question/answer/department/
language/synthetic). The translation builder pairs English sources with
translations obtained through a pluggable client — live HTTP against any
chat-completion-style endpoint, or an in-process mock for offline runs —
and persists each completed pair immediately so a crash loses at most the
in-flight item.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import AuthError, CorruptFileError, TransientTransportError, TranslationError

logger = logging.getLogger(__name__)

DEPARTMENTS = (
    "Surgical",
    "Obstetrics and Gynecology",
    "Pediatrics",
    "Internal Medicine",
    "Andriatria",
    "Multiple",
)
LANGUAGES = ("CN", "EN")

DEFAULT_TOKEN_ENV = "NANOGLM_TRANSLATOR_TOKEN"
DEFAULT_INSTRUCTION = "将下面的英文医疗问答内容翻译成中文：\n"


@dataclass(frozen=True)
class QaRecord:
    question: str
    answer: str
    department: str = "Multiple"
    language: str = "CN"
    synthetic: bool = False

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be nonempty")
        if not self.answer:
            raise ValueError("answer must be nonempty")
        if self.department not in DEPARTMENTS:
            raise ValueError(f"unknown department {self.department!r}")
        if self.language not in LANGUAGES:
            raise ValueError(f"unknown language {self.language!r}")

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "department": self.department,
            "language": self.language,
            "synthetic": self.synthetic,
        }


@dataclass(frozen=True)
class ParallelCorpusRecord:
    source: str
    target: str
    origin_id: str
    translator: str = "unknown"

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("both sides of a parallel record must be nonempty")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "origin_id": self.origin_id,
            "translator": self.translator,
        }


@dataclass
class MalformedLine:
    line_no: int
    reason: str


@dataclass
class CorpusStats:
    total: int = 0
    by_department: Counter = field(default_factory=Counter)
    by_language: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "by_department": dict(self.by_department),
            "by_language": dict(self.by_language),
        }


@dataclass
class LoadReport:
    records: list[QaRecord]
    stats: CorpusStats
    errors: list[MalformedLine]


def load_qa_corpus(path, strict: bool = False) -> LoadReport:
    """Parse a line-delimited QA corpus.

    Malformed lines are collected (with line numbers) while valid lines
    still load; ``strict`` aborts on the first malformed line instead.
    """
    records: list[QaRecord] = []
    errors: list[MalformedLine] = []
    stats = CorpusStats()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record must be a JSON object")
                rec = QaRecord(
                    question=str(obj.get("question") or ""),
                    answer=str(obj.get("answer") or ""),
                    department=obj.get("department", "Multiple"),
                    language=obj.get("language", "CN"),
                    synthetic=bool(obj.get("synthetic", False)),
                )
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                if strict:
                    raise CorruptFileError(f"line {line_no}: {exc}") from exc
                errors.append(MalformedLine(line_no, str(exc)))
                continue
            records.append(rec)
            stats.total += 1
            stats.by_department[rec.department] += 1
            stats.by_language[rec.language] += 1
    return LoadReport(records, stats, errors)


def save_qa_corpus(records: Sequence[QaRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# translation
# ---------------------------------------------------------------------------


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0

    def delay(self, attempt: int) -> float:
        return self.backoff_base * self.backoff_factor**attempt


class HttpChatTransport:
    """Minimal chat-completion-style transport (request schema in README).

    The bearer token is read from the named environment variable at request
    time and never stored on the object or logged.
    """

    def __init__(self, endpoint: str, model: str = "gpt-3.5-turbo",
                 auth_token_env: str = DEFAULT_TOKEN_ENV,
                 instruction: str = DEFAULT_INSTRUCTION, timeout: float = 30.0):
        self.endpoint = endpoint
        self.model = model
        self.auth_token_env = auth_token_env
        self.instruction = instruction
        self.timeout = timeout

    def __call__(self, source: str) -> str:
        import httpx

        headers = {}
        token = os.environ.get(self.auth_token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": self.instruction + source}],
        }
        try:
            resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except httpx.TransportError as exc:
            raise TransientTransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
        if resp.status_code >= 500 or resp.status_code in (408, 429):
            raise TransientTransportError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise TranslationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise TranslationError(f"malformed response body: {exc}") from exc


@dataclass
class TranslatorClient:
    """Pluggable translation client.

    ``transport`` maps one source text to its translation; retries with
    exponential backoff apply only to :class:`TransientTransportError`.
    """

    transport: Callable[[str], str]
    name: str = "mock"
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    parallelism: int = 1
    sleep: Callable[[float], None] = time.sleep

    def describe(self) -> dict:
        """Loggable description; never contains credential material."""
        return {"translator": self.name, "max_attempts": self.retry.max_attempts,
                "parallelism": self.parallelism}


@dataclass
class ItemFailure:
    index: int
    source: str
    error: str
    attempts: int


@dataclass
class BatchReport:
    records: list[ParallelCorpusRecord]
    failures: list[ItemFailure]
    retries: dict[int, int]

    @property
    def ok(self) -> bool:
        return not self.failures


def _translate_one(client: TranslatorClient, index: int, source: str):
    attempts = 0
    while True:
        attempts += 1
        try:
            return client.transport(source), attempts
        except TransientTransportError as exc:
            if attempts >= client.retry.max_attempts:
                raise TranslationError(f"gave up after {attempts} attempts: {exc}") from exc
            delay = client.retry.delay(attempts - 1)
            logger.warning("item %d transient failure (attempt %d): %s; retrying in %.2fs",
                           index, attempts, exc, delay)
            client.sleep(delay)


def translate_batch(client: TranslatorClient, sources: Sequence[str],
                    out_path=None) -> BatchReport:
    """Translate sources in order, persisting each completed pair at once.

    Permanent failures are recorded and skipped; the pipeline continues.
    An :class:`AuthError` aborts immediately. With ``parallelism > 1``
    requests overlap but records are still committed in input order, so an
    interrupted output file is always a valid prefix.
    """
    if not sources:
        raise ValueError("sources must be nonempty")
    out_file = open(out_path, "a", encoding="utf-8") if out_path is not None else None
    records: list[ParallelCorpusRecord] = []
    failures: list[ItemFailure] = []
    retries: dict[int, int] = {}

    def commit(index: int, source: str, target: str) -> None:
        rec = ParallelCorpusRecord(source, target, origin_id=str(index), translator=client.name)
        records.append(rec)
        if out_file is not None:
            out_file.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
            out_file.flush()

    try:
        if client.parallelism <= 1:
            for index, source in enumerate(sources):
                try:
                    target, attempts = _translate_one(client, index, source)
                except AuthError:
                    raise
                except TranslationError as exc:
                    failures.append(ItemFailure(index, source, str(exc), client.retry.max_attempts))
                    continue
                if attempts > 1:
                    retries[index] = attempts - 1
                commit(index, source, target)
        else:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=client.parallelism) as pool:
                futures = [pool.submit(_translate_one, client, i, s) for i, s in enumerate(sources)]
                for index, (source, fut) in enumerate(zip(sources, futures)):
                    try:
                        target, attempts = fut.result()
                    except AuthError:
                        raise
                    except TranslationError as exc:
                        failures.append(ItemFailure(index, source, str(exc), client.retry.max_attempts))
                        continue
                    if attempts > 1:
                        retries[index] = attempts - 1
                    commit(index, source, target)
    finally:
        if out_file is not None:
            out_file.close()
    return BatchReport(records, failures, retries)


def load_parallel_corpus(path) -> list[ParallelCorpusRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(ParallelCorpusRecord(
                    source=obj["source"], target=obj["target"],
                    origin_id=str(obj["origin_id"]), translator=obj.get("translator", "unknown")))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorruptFileError(f"line {line_no}: {exc}") from exc
    return records


def export_training_pairs(records: Sequence[ParallelCorpusRecord], path,
                          instruction: str = DEFAULT_INSTRUCTION) -> int:
    """Write translation pairs as a QA corpus consumable by the trainer."""
    qa = [QaRecord(question=instruction + rec.source, answer=rec.target,
                   department="Multiple", language="CN", synthetic=True)
          for rec in records]
    save_qa_corpus(qa, path)
    return len(qa)
