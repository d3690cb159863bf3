"""Tokenization and the fixed vocabulary shared by generator, teacher and student."""

from __future__ import annotations

import re
from collections.abc import Iterable, Sequence

EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

EOS_ID = 0
PAD_ID = 1
UNK_ID = 2

SPECIAL_TOKENS = (EOS_TOKEN, PAD_TOKEN, UNK_TOKEN)

# Template words used when serializing (label, text) pairs and keyword conditions.
LABEL_WORD = "label"
TEXT_WORD = "text"
KEYWORDS_WORD = "keywords"
SEP_TOKEN = "|"

# Words (letters/digits/underscore, internal apostrophes) or single punctuation marks.
_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")

# Punctuation glued to the preceding token when detokenizing ("sentence :" -> "sentence:").
_NO_SPACE_BEFORE = frozenset({":", ",", ".", ";", "!", "?"})


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    parts: list[str] = []
    for tok in tokens:
        if tok in _NO_SPACE_BEFORE and parts:
            parts[-1] += tok
        else:
            parts.append(tok)
    return " ".join(parts)


class Vocab:
    """Immutable token <-> id table. Ids 0..2 are reserved for specials."""

    def __init__(self, tokens: Iterable[str]):
        self._tokens: list[str] = list(SPECIAL_TOKENS)
        seen = set(self._tokens)
        for tok in tokens:
            if tok and tok not in seen:
                seen.add(tok)
                self._tokens.append(tok)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id(tok) for tok in tokenize(text)]

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(tok) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> str:
        """Detokenized string; special tokens are dropped."""
        return detokenize([self._tokens[i] for i in ids if i >= len(SPECIAL_TOKENS)])

    def tokens_of(self, ids: Sequence[int]) -> list[str]:
        return [self._tokens[i] for i in ids if i >= len(SPECIAL_TOKENS)]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        ordered: list[str] = []
        seen: set[str] = set()
        for text in texts:
            for tok in tokenize(text):
                if tok not in seen:
                    seen.add(tok)
                    ordered.append(tok)
        return cls(sorted(ordered))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tuple(tokens[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab file {path} does not start with the reserved special tokens")
        return cls(tokens[3:])
