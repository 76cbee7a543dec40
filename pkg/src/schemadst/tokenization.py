"""Word/punctuation tokenizer with exact character offsets.

Tokens are lowercased for vocabulary lookup only; the surface text is
always recovered from the source string through the offsets, so spans
decode back to the original casing.
"""

from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

PAD, UNK, CLS, SEP, INT, PV = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[int]", "[pv]"
RESERVED = (PAD, UNK, CLS, SEP, INT, PV)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, INT_ID, PV_ID = range(len(RESERVED))

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def normalize(token: str) -> str:
    return token.lower()


class Vocabulary:
    """Bidirectional token/id map with the six reserved ids fixed at 0..5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token: list[str] = list(RESERVED)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.token_to_id:
                raise ValueError(f"duplicate vocabulary entry {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(normalize(token), UNK_ID)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(lines[len(RESERVED):])


@dataclass(frozen=True)
class Token:
    id: int
    text: str
    char_start: int
    char_end: int
    source: str = ""

    @property
    def is_special(self) -> bool:
        return self.char_start == self.char_end


class Tokenizer(Protocol):
    """Seam for swapping in a subword tokenizer; offsets must stay exact."""

    def __call__(self, text: str, vocab: Vocabulary, source: str = "") -> list[Token]: ...


def split_words(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 6`` most frequent normalized tokens.

    Ties are broken lexicographically so the result does not depend on
    corpus order.
    """
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)} reserved tokens, got {max_size}")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(normalize(w) for w, _, _ in split_words(text))
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tok for tok, _ in ranked[: max_size - len(RESERVED)])


def tokenize(text: str, vocab: Vocabulary, source: str = "") -> list[Token]:
    return [Token(vocab.lookup(w), w, s, e, source) for w, s, e in split_words(text)]


def special_token(token_id: int, source: str = "") -> Token:
    return Token(token_id, RESERVED[token_id], 0, 0, source)


def detokenize_span(text: str, tokens: list[Token], span: tuple[int, int]) -> str:
    """Original surface text covered by tokens ``span[0]..span[1]`` inclusive."""
    i, j = span
    if not 0 <= i <= j < len(tokens):
        raise IndexError(f"span {span} outside token range 0..{len(tokens) - 1}")
    if any(t.is_special for t in tokens[i : j + 1]):
        raise ValueError(f"span {span} covers a special token")
    return text[tokens[i].char_start : tokens[j].char_end]
