"""Whitespace tokenizer with a corpus-built vocabulary.

Normalization keeps sentence-internal commas (as their own tokens) and drops
every other punctuation character, so "red square, a 4-sided shape." becomes
the tokens ``[red, square, ",", a, 4sided, shape]``. Sequences are wrapped in
BOS/EOS and truncated to a fixed context length keeping BOS and forcing a
final EOS.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_KEEP = re.compile(r"[^a-z0-9, ]+")


def text_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation except commas, split on whitespace."""
    lowered = text.lower()
    lowered = _KEEP.sub("", lowered)
    lowered = lowered.replace(",", " , ")
    return lowered.split()


def join_tokens(tokens: list[str]) -> str:
    """Inverse of the whitespace split: commas re-attach to the previous word."""
    out: list[str] = []
    for tok in tokens:
        if tok == "," and out:
            out[-1] = out[-1] + ","
        else:
            out.append(tok)
    return " ".join(out)


def normalize(text: str) -> str:
    """Canonical text form: what detokenize(tokenize(text)) returns for in-vocab text."""
    return join_tokens(text_tokens(text))


@dataclass
class TokenSeq:
    ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab_size: int, max_context: int) -> "TokenSeq":
        if len(self.ids) > max_context:
            raise ValueError(f"sequence length {len(self.ids)} exceeds context {max_context}")
        if any(i < 0 or i >= vocab_size for i in self.ids):
            raise ValueError("token id out of vocabulary range")
        if not self.ids or self.ids[0] != BOS or self.ids[-1] != EOS:
            raise ValueError("sequence must start with BOS and end with EOS")
        return self


class Vocabulary:
    """Fixed word list; ids 0..3 are PAD/BOS/EOS/UNK, the rest sorted words."""

    def __init__(self, words: list[str]):
        self.words = list(SPECIAL_TOKENS) + list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def build(cls, corpus: list[str]) -> "Vocabulary":
        seen: set[str] = set()
        for text in corpus:
            seen.update(text_tokens(text))
        return cls(sorted(seen))

    def encode(self, text: str, max_context: int = 20) -> TokenSeq:
        word_ids = [self.index.get(t, UNK) for t in text_tokens(text)]
        ids = [BOS] + word_ids + [EOS]
        if len(ids) > max_context:
            ids = ids[: max_context - 1] + [EOS]
        return TokenSeq(ids)

    def decode(self, ids) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            toks.append(self.words[i])
        return join_tokens(toks)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.words[len(SPECIAL_TOKENS):], f, ensure_ascii=False, indent=0)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))


def tokenize(text: str, vocab: Vocabulary, max_context: int = 20) -> TokenSeq:
    return vocab.encode(text, max_context)


def detokenize(seq, vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    return vocab.decode(ids)
