"""Letter-trigram hashing of text into fixed-size sparse count vectors."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DIM = 30_000

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN = re.compile(r"[^\W_]+")


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 bytes of ``text``."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 20)
def _token_trigrams(token: str) -> tuple[str, ...]:
    wrapped = f"#{token}#"
    return tuple(wrapped[i : i + 3] for i in range(max(len(wrapped) - 2, 1)))


@lru_cache(maxsize=1 << 20)
def _hash_cached(trigram: str) -> int:
    return fnv1a64(trigram)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def letter_trigrams(text: str) -> list[str]:
    """Boundary-marked letter trigrams of every token in ``text``.

    >>> letter_trigrams("cat")
    ['#ca', 'cat', 'at#']
    """
    out: list[str] = []
    for token in tokenize(text):
        out.extend(_token_trigrams(token))
    return out


@dataclass(frozen=True)
class TrigramVocab:
    """Stateless trigram -> bucket map: FNV-1a 64 modulo ``dim``."""

    dim: int = DEFAULT_DIM

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("vocab dim must be positive")

    def index(self, trigram: str) -> int:
        return _hash_cached(trigram) % self.dim


@dataclass(frozen=True)
class FeatureVector:
    """Sparse non-negative vector with strictly increasing indices."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ShapeError("feature entries", "matching 1-d arrays", (idx.shape, val.shape))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.dim or np.any(np.diff(idx) <= 0)):
            raise ValueError("feature indices must be strictly increasing and < dim")
        if np.any(val < 0):
            raise ValueError("feature values must be non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_counts(cls, dim: int, counts: dict[int, float]) -> "FeatureVector":
        keys = sorted(counts)
        return cls(dim, np.array(keys, dtype=np.int64), np.array([counts[k] for k in keys], dtype=np.float64))

    @classmethod
    def empty(cls, dim: int) -> "FeatureVector":
        return cls(dim, np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def l1(self) -> float:
        return float(self.values.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


def _count(trigrams: Iterable[str], vocab: TrigramVocab) -> Counter:
    counts: Counter = Counter()
    for tri in trigrams:
        counts[vocab.index(tri)] += 1
    return counts


def encode(text_fields: Sequence[str], vocab: TrigramVocab) -> FeatureVector:
    """Hash the trigram counts of all fields into one ``vocab.dim`` vector.

    Colliding trigrams add up, so the L1 norm of the result equals the total
    trigram count of the input.
    """
    counts: Counter = Counter()
    for field in text_fields:
        for token in tokenize(field):
            for tri in _token_trigrams(token):
                counts[vocab.index(tri)] += 1
    return FeatureVector.from_counts(vocab.dim, counts)


def encode_words(text_fields: Sequence[str], vocab: TrigramVocab, max_words: int | None = None) -> list[FeatureVector]:
    """One trigram vector per word, in reading order (the conv tower's input)."""
    words: list[str] = []
    for field in text_fields:
        words.extend(tokenize(field))
    if max_words is not None:
        words = words[:max_words]
    return [FeatureVector.from_counts(vocab.dim, _count(_token_trigrams(w), vocab)) for w in words]


def stack_dense(vectors: Sequence[FeatureVector], dim: int) -> np.ndarray:
    """Rows of dense vectors; an empty sequence yields a single zero row."""
    if not vectors:
        return np.zeros((1, dim))
    out = np.zeros((len(vectors), dim))
    for row, fv in enumerate(vectors):
        out[row, fv.indices] = fv.values
    return out
