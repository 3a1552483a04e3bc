"""Batches of document matrices built from a corpus split.

Training batches use documents merged from all training reviews. Evaluation
batches exclude the target pair's own review(s) by default; with exclusion
off, documents are merged from the training reviews plus the evaluated
records themselves (the leaky protocol, kept for comparison).
"""

from __future__ import annotations

import functools
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from .ingest import CorpusSplit, EntityDocument, ReviewRecord, build_documents
from .model import CorpusStats, SideBatch
from .textrep import (EmbeddingTable, TfidfModel, Vocabulary, build_vocabulary, encode_document, fit_tfidf,
                      load_embeddings, random_table, tokenize)

REPRESENTATIONS = ("embed", "tfidf", "random")


@dataclass
class RepConfig:
    rep: str = "embed"
    c: int = 300
    n_max: int = 300
    min_count: int = 1
    embeddings: str | None = None
    seed: int = 0
    exclude_target: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    records: list[ReviewRecord]
    user: SideBatch
    item: SideBatch
    ratings: np.ndarray

    def __len__(self):
        return len(self.records)


class Workspace:
    """Vocabulary, lookup table and document cache for one split and representation."""

    def __init__(self, split: CorpusSplit, rep: RepConfig, *, dtype="float64",
                 token_ids: bool = False, t: int = 1):
        if rep.rep not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {rep.rep!r}; choose from {REPRESENTATIONS}")
        if rep.n_max < t:
            raise ValueError(f"n_max={rep.n_max} must be at least the window size t={t}")
        self.split = split
        self.rep = rep
        self.dtype = np.dtype(dtype)
        self.token_ids = token_ids
        self.tokenize = functools.lru_cache(maxsize=None)(tokenize)

        train = split.train
        review_tokens = [self.tokenize(r.text) for r in train]
        self.vocab: Vocabulary = build_vocabulary(review_tokens, rep.min_count)
        self.tfidf: TfidfModel | None = None
        if rep.rep == "embed":
            if not rep.embeddings:
                raise ValueError("the 'embed' representation needs an embeddings file")
            self.table: EmbeddingTable = load_embeddings(rep.embeddings, self.vocab, rep.c, rep.seed)
        else:
            self.table = random_table(self.vocab, rep.c, rep.seed)
            if rep.rep == "tfidf":
                self.tfidf = fit_tfidf(review_tokens)
        self.lookup = self.table.lookup_matrix()

        everything = sorted(list(split.train) + list(split.valid) + list(split.test), key=lambda r: r.ordinal)
        self.users = list(dict.fromkeys(r.user_id for r in everything))
        self.items = list(dict.fromkeys(r.item_id for r in everything))
        self.known_users = {r.user_id for r in train}
        self.known_items = {r.item_id for r in train}
        self.train_pairs = {r.pair for r in train}
        self._train_by = {"user": defaultdict(list), "item": defaultdict(list)}
        for r in train:
            self._train_by["user"][r.user_id].append(r)
            self._train_by["item"][r.item_id].append(r)
        self.train_docs = {
            "user": build_documents(train, self.tokenize, "user", entities=self.users),
            "item": build_documents(train, self.tokenize, "item", entities=self.items),
        }
        self._encoded: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
        self.audit: list[tuple[int, str, tuple[int, ...]]] | None = None
        self._train_ordinals = {r.ordinal for r in train}
        self._pool_key: frozenset | None = None
        self._pool_docs: dict = {}

    @property
    def mean_rating(self) -> float:
        return float(np.mean([r.rating for r in self.split.train]))

    def stats(self) -> CorpusStats:
        return CorpusStats(list(self.users), list(self.items), self.mean_rating)

    def fingerprint(self) -> str:
        return self.vocab.fingerprint()

    def is_cold(self, record: ReviewRecord) -> bool:
        return record.user_id not in self.known_users or record.item_id not in self.known_items

    # -- documents -----------------------------------------------------------------

    def _pooled_docs(self, evaluated: Sequence[ReviewRecord]) -> dict[str, dict[str, EntityDocument]]:
        key = frozenset(r.ordinal for r in evaluated)
        if self._pool_key != key:
            pool = list(self.split.train) + [r for r in evaluated if r.ordinal not in self._train_ordinals]
            self._pool_docs = {side: build_documents(pool, self.tokenize, side) for side in ("user", "item")}
            self._pool_key = key
        return self._pool_docs

    def _train_doc(self, side: str, entity: str) -> EntityDocument:
        docs = self.train_docs[side]
        # ids outside the corpus (ad-hoc prediction requests) get an empty document
        return docs[entity] if entity in docs else EntityDocument(entity, [], [], [])

    def eval_documents(self, records: Sequence[ReviewRecord],
                       evaluated: Sequence[ReviewRecord] | None = None
                       ) -> Iterator[tuple[EntityDocument, EntityDocument]]:
        """User and item documents used to predict each record at evaluation time.

        ``evaluated`` is the whole split being evaluated (defaults to
        ``records``); it only matters when target exclusion is off.
        """
        if not self.rep.exclude_target:
            docs = self._pooled_docs(evaluated if evaluated is not None else records)
            for r in records:
                udoc = docs["user"][r.user_id] if r.user_id in docs["user"] else self._train_doc("user", r.user_id)
                idoc = docs["item"][r.item_id] if r.item_id in docs["item"] else self._train_doc("item", r.item_id)
                yield udoc, idoc
            return
        for r in records:
            if r.pair in self.train_pairs:
                exclude = {r.pair}
                udoc = build_documents(self._train_by["user"][r.user_id], self.tokenize, "user",
                                       exclude, entities=[r.user_id])[r.user_id]
                idoc = build_documents(self._train_by["item"][r.item_id], self.tokenize, "item",
                                       exclude, entities=[r.item_id])[r.item_id]
            else:
                udoc = self._train_doc("user", r.user_id)
                idoc = self._train_doc("item", r.item_id)
            yield udoc, idoc

    def _encode(self, doc: EntityDocument, side: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        key = (side, doc.entity_id) if side else None
        if key is not None and key in self._encoded:
            return self._encoded[key]
        enc = encode_document(doc, self.table, self.rep.n_max, tfidf=self.tfidf)
        if key is not None:
            self._encoded[key] = enc
        return enc

    def _side(self, encoded: list[tuple[np.ndarray, np.ndarray]], entities: list[str]) -> SideBatch:
        ids = np.stack([e[0] for e in encoded])
        scales = np.stack([e[1] for e in encoded])
        mask = (ids != self.table.pad_index).astype(self.dtype)
        if self.token_ids:
            return SideBatch(mask=mask, token_ids=ids, scales=scales.astype(self.dtype), entities=entities)
        values = (self.lookup[ids] * scales[..., None]).astype(self.dtype).transpose(0, 2, 1)
        return SideBatch(mask=mask, values=values, entities=entities)

    def batch(self, records: Sequence[ReviewRecord], source: str = "eval",
              evaluated: Sequence[ReviewRecord] | None = None) -> Batch:
        """Assemble a batch; ``source`` is 'train' (training documents) or 'eval'."""
        records = list(records)
        if source == "train":
            uenc = [self._encode(self.train_docs["user"][r.user_id], "user") for r in records]
            ienc = [self._encode(self.train_docs["item"][r.item_id], "item") for r in records]
        elif source == "eval":
            uenc, ienc = [], []
            shared = not self.rep.exclude_target
            for r, (udoc, idoc) in zip(records, self.eval_documents(records, evaluated)):
                if self.audit is not None:
                    self.audit.append((r.ordinal, "user", tuple(udoc.source_ordinals)))
                    self.audit.append((r.ordinal, "item", tuple(idoc.source_ordinals)))
                cacheable = not shared and r.pair not in self.train_pairs
                uenc.append(self._encode(udoc, "user" if cacheable else None))
                ienc.append(self._encode(idoc, "item" if cacheable else None))
        else:
            raise ValueError(f"source must be 'train' or 'eval', got {source!r}")
        ratings = np.array([r.rating for r in records], dtype=self.dtype)
        return Batch(records, self._side(uenc, [r.user_id for r in records]),
                     self._side(ienc, [r.item_id for r in records]), ratings)

    def batches(self, records: Sequence[ReviewRecord], size: int, source: str = "eval") -> Iterator[Batch]:
        records = list(records)
        for start in range(0, len(records), size):
            yield self.batch(records[start:start + size], source, evaluated=records)
