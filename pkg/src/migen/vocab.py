"""Word-level tokenizer and vocabulary for report text."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

# hyphenated compounds stay whole; other punctuation becomes its own token;
# the literal "<unk>" survives so decode -> encode is stable
_TOKEN_RE = re.compile(r"<unk>|\w+(?:-\w+)*|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Lowercase and re-join tokens with single spaces."""
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Vocab:
    itos: tuple[str, ...]
    min_freq: int = 1
    stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIALS:
            raise InputError(f"vocab must start with the specials {SPECIALS}")
        stoi = {t: i for i, t in enumerate(self.itos)}
        if len(stoi) != len(self.itos):
            raise InputError("vocab tokens must be unique")
        object.__setattr__(self, "stoi", stoi)

    def __len__(self):
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(text.split("\n")[:-1]))


def build_vocab(corpus: Sequence[str], min_freq: int = 1) -> Vocab:
    """Frequency-thresholded vocabulary, ordered by count then spelling."""
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    for s in SPECIALS:
        counts.pop(s, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(SPECIALS + tuple(kept), min_freq=min_freq)


def encode(text: str, v: Vocab) -> list[int]:
    return [BOS] + [v.stoi.get(t, UNK) for t in tokenize(text)] + [EOS]


def decode(ids: Iterable[int], v: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= v.size:
            raise InputError(f"token id {i} outside vocabulary of size {v.size}")
        if i in (PAD, BOS, EOS):
            continue
        words.append(v.itos[i])
    return " ".join(words)


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    """Right-pad id sequences with PAD into an int array."""
    n = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out
