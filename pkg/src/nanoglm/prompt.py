"""Retrieval-augmented prompt design.

A dictionary of disease documents is compiled into an Aho-Corasick
automaton over raw UTF-8 bytes (no segmentation needed, so Chinese works
unchanged). User text is scanned for disease names and aliases; the first
leftmost-longest match selects the document whose sections are templated
into a context block ahead of the original question.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError, CorruptFileError, NotFoundError

SENTINEL = "[[KB]]"

DEFAULT_TEMPLATE = (
    "[[KB]]相关疾病：{NAME}\n"
    "症状：{SYMPTOMS}\n"
    "诊断：{DIAGNOSIS}\n"
    "治疗：{TREATMENT}\n"
    "预防：{PREVENTION}\n"
    "\n"
    "{QUESTION}"
)

DEFAULT_SECTION_BUDGET = 512

_PLACEHOLDERS = ("{NAME}", "{SYMPTOMS}", "{DIAGNOSIS}", "{TREATMENT}", "{PREVENTION}")


@dataclass(frozen=True)
class DiseaseDoc:
    doc_id: str
    name: str
    aliases: tuple[str, ...]
    symptoms: str
    diagnosis: str
    treatment: str
    prevention: str
    source: str = ""

    def terms(self) -> tuple[str, ...]:
        return (self.name, *self.aliases)


@dataclass(frozen=True)
class Match:
    term: str
    doc_id: str
    start: int  # byte offset
    end: int    # byte offset, exclusive


@dataclass(frozen=True)
class DesignedPrompt:
    user_text: str
    matched_doc_ids: tuple[str, ...]
    context_block: str
    final_prompt: str


class _Automaton:
    """Aho-Corasick over bytes."""

    def __init__(self, patterns: list[bytes]):
        self.goto: list[dict[int, int]] = [{}]
        self.fail: list[int] = [0]
        self.out: list[list[int]] = [[]]
        for idx, pat in enumerate(patterns):
            state = 0
            for byte in pat:
                nxt = self.goto[state].get(byte)
                if nxt is None:
                    self.goto.append({})
                    self.fail.append(0)
                    self.out.append([])
                    nxt = len(self.goto) - 1
                    self.goto[state][byte] = nxt
                state = nxt
            self.out[state].append(idx)
        queue = deque()
        for state in self.goto[0].values():
            queue.append(state)
        while queue:
            state = queue.popleft()
            for byte, nxt in self.goto[state].items():
                queue.append(nxt)
                f = self.fail[state]
                while f and byte not in self.goto[f]:
                    f = self.fail[f]
                self.fail[nxt] = self.goto[f].get(byte, 0)
                self.out[nxt] = self.out[nxt] + self.out[self.fail[nxt]]

    def scan(self, data: bytes):
        """Yield (end_offset_exclusive, pattern_index) for every occurrence."""
        state = 0
        for pos, byte in enumerate(data):
            while state and byte not in self.goto[state]:
                state = self.fail[state]
            state = self.goto[state].get(byte, 0)
            for idx in self.out[state]:
                yield pos + 1, idx


class KnowledgeLibrary:
    """Immutable set of disease documents plus the compiled matcher."""

    def __init__(self, docs: list[DiseaseDoc]):
        self.docs: dict[str, DiseaseDoc] = {}
        term_map: dict[str, str] = {}
        for doc in docs:
            if not doc.name:
                raise ConfigurationError("library", f"doc {doc.doc_id!r} has an empty canonical name")
            if doc.doc_id in self.docs:
                raise ConfigurationError("library", f"duplicate doc id {doc.doc_id!r}")
            self.docs[doc.doc_id] = doc
            for term in doc.terms():
                if not term:
                    raise ConfigurationError("library", f"doc {doc.doc_id!r} has an empty term")
                if term in term_map and term_map[term] != doc.doc_id:
                    raise ConfigurationError(
                        "library", f"term {term!r} maps to both {term_map[term]!r} and {doc.doc_id!r}")
                term_map[term] = doc.doc_id
        self._terms = sorted(term_map)
        self._term_doc = term_map
        self._patterns = [t.encode("utf-8") for t in self._terms]
        self._automaton = _Automaton(self._patterns)

    def __len__(self) -> int:
        return len(self.docs)

    def term_to_doc(self, term: str) -> str | None:
        return self._term_doc.get(term)

    def scan(self, data: bytes):
        for end, idx in self._automaton.scan(data):
            pat = self._patterns[idx]
            yield Match(self._terms[idx], self._term_doc[self._terms[idx]], end - len(pat), end)


def extract_keywords(text: str, library: KnowledgeLibrary) -> list[Match]:
    """All non-overlapping matches, resolved leftmost-longest, by span start."""
    raw = sorted(library.scan(text.encode("utf-8")), key=lambda m: (m.start, -(m.end - m.start)))
    picked: list[Match] = []
    cursor = 0
    for m in raw:
        if m.start >= cursor:
            picked.append(m)
            cursor = m.end
    return picked


def lookup(library: KnowledgeLibrary, doc_id: str) -> DiseaseDoc:
    doc = library.docs.get(doc_id)
    if doc is None:
        raise NotFoundError(f"no disease document with id {doc_id!r}")
    return doc


def truncate_utf8(text: str, budget: int) -> str:
    """Cut to at most ``budget`` bytes at a codepoint boundary."""
    raw = text.encode("utf-8")
    if len(raw) <= budget:
        return text
    return raw[:budget].decode("utf-8", errors="ignore")


def load_template(path) -> str:
    template = Path(path).read_text(encoding="utf-8")
    validate_template(template)
    return template


def validate_template(template: str) -> None:
    if template.count("{QUESTION}") != 1:
        raise ConfigurationError("template", "must contain {QUESTION} exactly once")
    if SENTINEL not in template:
        raise ConfigurationError("template", f"must contain the idempotence sentinel {SENTINEL}")


def design_prompt(user_text: str, library: KnowledgeLibrary,
                  template: str = DEFAULT_TEMPLATE,
                  section_budget: int = DEFAULT_SECTION_BUDGET) -> DesignedPrompt:
    """Augment ``user_text`` with the context block of the best-matching doc.

    No match (or an already-designed prompt, detected by the sentinel)
    passes the text through byte-exact. The final prompt always contains
    the original text verbatim.
    """
    validate_template(template)
    if SENTINEL in user_text:
        return DesignedPrompt(user_text, (), "", user_text)
    matches = extract_keywords(user_text, library)
    if not matches:
        return DesignedPrompt(user_text, (), "", user_text)
    ids: list[str] = []
    for m in matches:
        if m.doc_id not in ids:
            ids.append(m.doc_id)
    doc = lookup(library, matches[0].doc_id)
    rendered = template
    sections = {
        "{NAME}": doc.name,
        "{SYMPTOMS}": truncate_utf8(doc.symptoms, section_budget),
        "{DIAGNOSIS}": truncate_utf8(doc.diagnosis, section_budget),
        "{TREATMENT}": truncate_utf8(doc.treatment, section_budget),
        "{PREVENTION}": truncate_utf8(doc.prevention, section_budget),
    }
    for placeholder, value in sections.items():
        rendered = rendered.replace(placeholder, value)
    context_block = rendered.replace("{QUESTION}", "")
    final = rendered.replace("{QUESTION}", user_text)
    return DesignedPrompt(user_text, tuple(ids), context_block, final)


def load_library(path) -> KnowledgeLibrary:
    """Read the JSON library document (schema in the README)."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"library file is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("docs"), list):
        raise CorruptFileError("library file must be an object with a 'docs' array")
    docs = []
    for i, rec in enumerate(payload["docs"]):
        try:
            docs.append(DiseaseDoc(
                doc_id=str(rec["id"]),
                name=str(rec["name"]),
                aliases=tuple(str(a) for a in rec.get("aliases", [])),
                symptoms=str(rec.get("symptoms", "")),
                diagnosis=str(rec.get("diagnosis", "")),
                treatment=str(rec.get("treatment", "")),
                prevention=str(rec.get("prevention", "")),
                source=str(rec.get("source", "")),
            ))
        except KeyError as exc:
            raise CorruptFileError(f"library doc #{i} lacks required field {exc}") from exc
    return KnowledgeLibrary(docs)


def save_library(library: KnowledgeLibrary, path) -> None:
    docs = []
    for doc in library.docs.values():
        docs.append({
            "id": doc.doc_id,
            "name": doc.name,
            "aliases": list(doc.aliases),
            "symptoms": doc.symptoms,
            "diagnosis": doc.diagnosis,
            "treatment": doc.treatment,
            "prevention": doc.prevention,
            "source": doc.source,
        })
    Path(path).write_text(json.dumps({"docs": docs}, ensure_ascii=False, indent=2), encoding="utf-8")
