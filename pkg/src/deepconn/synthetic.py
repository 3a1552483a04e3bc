"""Planted-signal review corpora for desk-scale experiments.

Every user and item carries a hidden trait. Each review mentions one
trait word for its user and one for its item among filler words, and the
rating is a fixed function of the two traits. The companion embedding file
places synonyms of a trait around a shared centroid, standing in for
pretrained vectors that put related words close together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import ReviewRecord, write_reviews
from .textrep import write_embeddings

SYNONYMS = 4


@dataclass
class SyntheticCorpus:
    records: list[ReviewRecord]
    user_traits: dict[str, int]
    item_traits: dict[str, int]
    words: list[str]
    vectors: np.ndarray

    def write(self, directory: str | Path, stem: str = "reviews") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        data = directory / f"{stem}.jsonl"
        vecs = directory / f"{stem}.vec"
        write_reviews(self.records, data)
        write_embeddings(vecs, self.words, self.vectors)
        return data, vecs


def _rating(kind: str, a: int, b: int) -> float:
    if kind == "additive":
        return 3.0 + a + b
    if kind == "interaction":
        return 3.0 + 1.5 * a * b
    raise ValueError(f"unknown corpus kind {kind!r}")


def planted_corpus(n_users: int = 20, n_items: int = 20, n_reviews: int = 200, *, kind: str = "additive",
                   seed: int = 0, filler_vocab: int = 60, filler_per_review: int = 8, c: int = 16,
                   noise: float = 0.05) -> SyntheticCorpus:
    """Generate a corpus whose ratings are determined by planted trait words.

    ``additive``: traits in {-1, 0, 1}, rating = 3 + a_u + b_i.
    ``interaction``: traits in {-1, 1}, rating = 3 + 1.5 a_u b_i.
    """
    if n_reviews > n_users * n_items:
        raise ValueError("more reviews requested than distinct (user, item) pairs")
    rng = np.random.default_rng([seed, 0x5E7])
    levels = (-1, 0, 1) if kind == "additive" else (-1, 1)
    users = [f"u{k:03d}" for k in range(n_users)]
    items = [f"i{k:03d}" for k in range(n_items)]
    user_traits = {u: int(levels[k % len(levels)]) for k, u in enumerate(users)}
    item_traits = {i: int(levels[k % len(levels)]) for k, i in enumerate(items)}
    rng.shuffle(users)
    rng.shuffle(items)

    def trait_words(side, level):
        return [f"{side}{'neg' if level < 0 else 'pos' if level > 0 else 'mid'}{s}" for s in range(SYNONYMS)]

    # cover every user and item first, then fill with random distinct pairs
    pairs = set()
    for k in range(max(n_users, n_items)):
        pairs.add((users[k % n_users], items[(k * 7 + 3) % n_items]))
    all_pairs = [(u, i) for u in sorted(users) for i in sorted(items) if (u, i) not in pairs]
    extra = rng.permutation(len(all_pairs))[:max(n_reviews - len(pairs), 0)]
    pairs = sorted(pairs) + [all_pairs[k] for k in sorted(extra)]
    pairs = [pairs[k] for k in rng.permutation(len(pairs))][:n_reviews]

    fillers = [f"w{k}" for k in range(filler_vocab)]
    records = []
    for ordinal, (u, i) in enumerate(pairs):
        words = list(rng.choice(fillers, size=filler_per_review))
        for side, level in (("usr", user_traits[u]), ("itm", item_traits[i])):
            syn = trait_words(side, level)[rng.integers(SYNONYMS)]
            words.insert(int(rng.integers(len(words) + 1)), syn)
        records.append(ReviewRecord(u, i, _rating(kind, user_traits[u], item_traits[i]), " ".join(words), ordinal))

    vocab_words = list(fillers)
    vectors = [rng.uniform(-0.25, 0.25, size=c) for _ in fillers]
    for side in ("usr", "itm"):
        for level in levels:
            centroid = rng.uniform(-0.5, 0.5, size=c)
            for w in trait_words(side, level):
                vocab_words.append(w)
                vectors.append(centroid + rng.normal(0.0, noise, size=c))
    return SyntheticCorpus(records, user_traits, item_traits, vocab_words, np.array(vectors))
