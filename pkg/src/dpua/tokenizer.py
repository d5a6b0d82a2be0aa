"""Word-level tokenizer with an unknown-token fallback."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, UNK, BOS, EOS, SEP)

# newline, decimal literal, word (with inner hyphen/apostrophe), single symbol
TOKEN_RE = re.compile(r"\n|\d+\.\d+|\w+(?:[-']\w+)*|[^\w\s]")

_NO_SPACE_BEFORE = set(".,:;?!)]}%")
_NO_SPACE_AFTER = set("([{")


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text)


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(0), m.start(), m.end()) for m in TOKEN_RE.finditer(text)]


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    prev = "\n"
    for tok in tokens:
        if tok == "\n":
            out.append("\n")
        elif prev == "\n" or tok in _NO_SPACE_BEFORE or prev in _NO_SPACE_AFTER:
            out.append(tok)
        else:
            out.append(" " + tok)
        prev = tok
    return "".join(out)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicates")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 5000, min_freq: int = 1) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        for s in SPECIALS:
            counts.pop(s, None)
        ranked = sorted((t for t, c in counts.items() if c >= min_freq),
                        key=lambda t: (-counts[t], t))
        ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(SPECIALS + tuple(ranked))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def bos_id(self):
        return 2

    @property
    def eos_id(self):
        return 3

    @property
    def sep_id(self):
        return 4

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def encode_prompt(self, text: str) -> list[int]:
        return [self.bos_id] + self.encode(text) + [self.sep_id]

    def encode_target(self, text: str) -> list[int]:
        return self.encode(text) + [self.eos_id]

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i == self.eos_id and stop_at_eos:
                break
            if i in (self.pad_id, self.bos_id, self.sep_id, self.eos_id):
                continue
            toks.append(self.tokens[i])
        return detokenize(toks)
