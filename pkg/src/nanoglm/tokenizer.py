"""Byte-level tokenizer.

Every UTF-8 byte maps to ``byte value + n_special``; the first ``n_special``
ids are reserved for control tokens. This sidesteps shipping a vocabulary
file while covering any text, Chinese included, and makes
``detokenize(tokenize(s)) == s`` hold for all strings.
"""

from __future__ import annotations

SPECIAL_TOKENS = ("BOS", "EOS", "PAD", "SEP")


class ByteTokenizer:
    def __init__(self, n_special: int = len(SPECIAL_TOKENS)):
        if n_special < len(SPECIAL_TOKENS):
            raise ValueError(f"need at least {len(SPECIAL_TOKENS)} special ids, got {n_special}")
        self.n_special = n_special
        self.bos_id, self.eos_id, self.pad_id, self.sep_id = range(len(SPECIAL_TOKENS))

    @property
    def vocab_size(self) -> int:
        return 256 + self.n_special

    def encode(self, text: str) -> list[int]:
        off = self.n_special
        return [b + off for b in text.encode("utf-8")]

    def decode(self, ids, errors: str = "replace") -> str:
        """Inverse of encode; special ids are dropped."""
        off = self.n_special
        raw = bytes(i - off for i in ids if i >= off)
        return raw.decode("utf-8", errors=errors)
