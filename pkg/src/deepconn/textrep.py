"""Text representation: tokens, vocabulary, embedding tables and document matrices."""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import EntityDocument

logger = logging.getLogger(__name__)

_SPLIT = re.compile(r"[^0-9a-z]+")
RANDOM_BOUND = 0.25


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [tok for tok in _SPLIT.split(text.lower()) if tok]


class Vocabulary:
    """Dense bijection between tokens and indices ``0..size-1``."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")
        if not self.itos:
            raise ValueError("vocabulary is empty")

    @property
    def size(self) -> int:
        return len(self.itos)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token: str) -> int:
        return self.stoi[token]

    def get(self, token: str, default=None):
        return self.stoi.get(token, default)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for tok in self.itos:
            h.update(tok.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()[:16]


def build_vocabulary(documents: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first, ties lexicographic."""
    freq = Counter()
    for doc in documents:
        freq.update(doc)
    if not freq:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, n in freq.items() if n >= min_count), key=lambda t: (-freq[t], t))
    if not kept:
        raise ValueError(f"no token reaches min_count={min_count}")
    return Vocabulary(kept)


@dataclass
class EmbeddingTable:
    """Word vectors for a vocabulary plus a shared OOV row and a zero pad row."""

    vocab: Vocabulary
    vectors: np.ndarray          # (size, c)
    oov_vector: np.ndarray       # (c,)
    coverage: float = 1.0
    diagnostics: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.oov_vector = np.asarray(self.oov_vector, dtype=np.float64)
        if self.vectors.shape[0] != self.vocab.size:
            raise ValueError("embedding rows must match the vocabulary size")
        if not np.all(np.isfinite(self.vectors)) or not np.all(np.isfinite(self.oov_vector)):
            raise ValueError("embedding table contains non-finite values")

    @property
    def c(self) -> int:
        return self.vectors.shape[1]

    @property
    def pad_vector(self) -> np.ndarray:
        return np.zeros(self.c)

    @property
    def oov_index(self) -> int:
        return self.vectors.shape[0]

    @property
    def pad_index(self) -> int:
        return self.vectors.shape[0] + 1

    def lookup_matrix(self) -> np.ndarray:
        """Rows for every vocabulary index, then OOV, then pad."""
        return np.vstack([self.vectors, self.oov_vector[None, :], np.zeros((1, self.c))])


def _oov_vector(c: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x00F])
    return rng.uniform(-RANDOM_BOUND, RANDOM_BOUND, size=c)


def load_embeddings(path: str | Path, vocab: Vocabulary, c: int = 300, seed: int = 0) -> EmbeddingTable:
    """Read whitespace-separated text vectors (optional ``count dim`` header).

    Vocabulary tokens missing from the file get the shared OOV vector, drawn
    uniformly from [-0.25, 0.25] under ``seed``.
    """
    vectors = np.zeros((vocab.size, c))
    found = np.zeros(vocab.size, dtype=bool)
    diagnostics: list[str] = []
    with Path(path).open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                dim = int(parts[1])
                if dim != c:
                    raise ValueError(f"{path}: header declares dimension {dim}, configured c={c}")
                continue
            token, values = parts[0], parts[1:]
            try:
                row = np.array([float(v) for v in values])
            except ValueError:
                diagnostics.append(f"{path}:{lineno}: unparseable vector")
                continue
            if row.size != c:
                if not found.any() and not diagnostics:
                    raise ValueError(f"{path}:{lineno}: vector dimension {row.size}, configured c={c}")
                diagnostics.append(f"{path}:{lineno}: expected {c} values, got {row.size}")
                continue
            if not np.all(np.isfinite(row)):
                diagnostics.append(f"{path}:{lineno}: non-finite vector")
                continue
            idx = vocab.get(token)
            if idx is not None and not found[idx]:
                vectors[idx] = row
                found[idx] = True
    oov = _oov_vector(c, seed)
    vectors[~found] = oov
    coverage = float(found.sum()) / vocab.size
    for msg in diagnostics:
        logger.warning("embedding file: %s", msg)
    logger.info("embedding coverage %.4f (%d/%d)", coverage, int(found.sum()), vocab.size)
    return EmbeddingTable(vocab, vectors, oov, coverage, diagnostics)


def random_table(vocab: Vocabulary, c: int, seed: int) -> EmbeddingTable:
    """Fixed random word vectors, i.i.d. uniform on [-0.25, 0.25]."""
    if c < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng([seed, 0xA1D])
    vectors = rng.uniform(-RANDOM_BOUND, RANDOM_BOUND, size=(vocab.size, c))
    return EmbeddingTable(vocab, vectors, _oov_vector(c, seed), coverage=0.0)


def write_embeddings(path: str | Path, words: Sequence[str], vectors: np.ndarray, header: bool = True) -> None:
    vectors = np.asarray(vectors)
    with Path(path).open("w", encoding="utf-8") as fh:
        if header:
            fh.write(f"{len(words)} {vectors.shape[1]}\n")
        for word, row in zip(words, vectors):
            fh.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


@dataclass
class DocumentMatrix:
    values: np.ndarray   # (c, n)
    mask: np.ndarray     # (n,) 1.0 at real tokens

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def c(self) -> int:
        return self.values.shape[0]


@dataclass
class TfidfModel:
    """Document frequencies counted over training reviews."""

    df: dict[str, int]
    n_docs: int

    def idf(self, token: str) -> float:
        return math.log(self.n_docs / (1 + self.df.get(token, 0))) + 1.0


def fit_tfidf(documents: Iterable[Sequence[str]]) -> TfidfModel:
    df: Counter = Counter()
    n = 0
    for doc in documents:
        df.update(set(doc))
        n += 1
    if n == 0:
        raise ValueError("cannot fit TF-IDF on zero documents")
    return TfidfModel(dict(df), n)


def encode_document(doc: EntityDocument | Sequence[str], table: EmbeddingTable,
                    n_max: int, tfidf: TfidfModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row indices into ``table.lookup_matrix()`` and per-column scales.

    Scales are 1 at real tokens (or tf*idf when ``tfidf`` is given) and 0 at
    padding, so ``lookup[ids] * scale`` is the document matrix transposed.
    """
    tokens = doc.tokens if isinstance(doc, EntityDocument) else list(doc)
    ids = np.full(n_max, table.pad_index, dtype=np.int64)
    scale = np.zeros(n_max)
    head = tokens[:n_max]
    ids[:len(head)] = [table.vocab.get(tok, table.oov_index) for tok in head]
    if tfidf is None:
        scale[:len(head)] = 1.0
    else:
        tf = Counter(tokens)
        scale[:len(head)] = [tf[tok] * tfidf.idf(tok) for tok in head]
    return ids, scale


def document_matrix(doc: EntityDocument | Sequence[str], table: EmbeddingTable, n_max: int) -> DocumentMatrix:
    """Word vectors of the first ``n_max`` tokens as columns, zero-padded to width ``n_max``."""
    ids, scale = encode_document(doc, table, n_max)
    values = table.lookup_matrix()[ids].T * scale
    return DocumentMatrix(values, (ids != table.pad_index).astype(np.float64))


def tfidf_matrix(doc: EntityDocument | Sequence[str], tfidf_model: TfidfModel, rand_table: EmbeddingTable,
                 n_max: int) -> DocumentMatrix:
    """Random word vectors scaled by the token's tf*idf within ``doc``."""
    ids, scale = encode_document(doc, rand_table, n_max, tfidf=tfidf_model)
    values = rand_table.lookup_matrix()[ids].T * scale
    mask = (ids != rand_table.pad_index).astype(np.float64)
    return DocumentMatrix(values, mask)
