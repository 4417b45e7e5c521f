"""Whitespace tokenizer and closed vocabulary shared by the text-side models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

START = "<s>"
END = "</s>"
UNK = "<unk>"
SPECIALS = (START, END, UNK)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = sorted({w for t in texts for w in tokenize(t)} - set(SPECIALS))
        return cls(SPECIALS + tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def start_id(self) -> int:
        return 0

    @property
    def end_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def id(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.end_id:
                break
            if i == self.start_id:
                continue
            words.append(self.tokens[i])
        return " ".join(words)
