"""Tokenization, vocabularies and the shared word-embedding table."""
from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError, ParseError
from .tensor import Node, take_rows

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"
PAD_ID, UNK_ID, SEP_ID = 0, 1, 2
RESERVED = (PAD, UNK, SEP)

OOV_RANGE = 0.25

_PUNCT = set(string.punctuation)


def _split_token(word: str) -> list[str]:
    head = []
    i, j = 0, len(word)
    while i < j and word[i] in _PUNCT:
        head.append(word[i])
        i += 1
    tail = []
    while j > i and word[j - 1] in _PUNCT:
        tail.append(word[j - 1])
        j -= 1
    core = [word[i:j]] if j > i else []
    return head + core + tail[::-1]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel leading/trailing ASCII punctuation.

    >>> tokenize("guns, crime.")
    ['guns', ',', 'crime', '.']
    """
    tokens: list[str] = []
    for word in text.lower().split():
        tokens.extend(_split_token(word))
    return tokens


class Vocabulary:
    """Token <-> id map with PAD=0, UNK=1, SEP=2 always present."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise InputError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def words(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Most frequent tokens first (ties lexicographic); rarer than ``min_count`` map to UNK."""
    if min_count < 1:
        raise InputError("min_count must be >= 1")
    counts = Counter(tok for doc in corpus for tok in doc if tok not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def as_node(self) -> Node:
        """A trainable leaf when ``trainable``, a constant otherwise."""
        node = Node(self.matrix.copy(), requires_grad=self.trainable, name="embedding")
        return node


def random_table(vocab: Vocabulary, dim: int, rng: np.random.Generator) -> EmbeddingTable:
    matrix = rng.uniform(-OOV_RANGE, OOV_RANGE, size=(len(vocab), dim))
    matrix[PAD_ID] = 0.0
    return EmbeddingTable(matrix)


def _parse_vectors(path: Path):
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip("\r").split(" ")
            parts = [p for p in parts if p != ""]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                raise ParseError("expected a token followed by its vector", lineno)
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError(f"non-numeric vector component for token {parts[0]!r}", lineno) from None
            if not np.isfinite(vec).all():
                raise ParseError(f"non-finite vector component for token {parts[0]!r}", lineno)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FormatError(f"line {lineno}: vector has {vec.size} components, expected {dim}")
            yield parts[0], vec


def load_pretrained(path, vocab: Vocabulary, seed: int = 0) -> tuple[EmbeddingTable, int]:
    """Initialise an embedding table from a plain-text vector file.

    Vocabulary rows found in the file are copied exactly; the rest are drawn
    uniform in [-0.25, 0.25] from ``seed``. Returns the table and the number
    of vocabulary tokens found in the file.
    """
    vectors = {}
    dim = None
    for token, vec in _parse_vectors(Path(path)):
        dim = vec.size
        if token in vocab.stoi and token not in vectors:
            vectors[token] = vec
    if dim is None:
        raise FormatError(f"{path}: no vectors found")
    table = random_table(vocab, dim, np.random.default_rng(seed))
    for token, vec in vectors.items():
        idx = vocab.stoi[token]
        if idx != PAD_ID:
            table.matrix[idx] = vec
    return table, len(vectors)


def lookup(table: Node, ids) -> Node:
    """Embed an id array (any shape); PAD never receives gradient."""
    return take_rows(table, ids, skip_id=PAD_ID)
