"""Review corpus ingestion: JSONL loading, seeded splits, merged entity documents."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("user", "item", "rating", "text")


class CorpusError(ValueError):
    """Raised for unusable corpus inputs (bad file, bad split request)."""


@dataclass(frozen=True, slots=True)
class ReviewRecord:
    user_id: str
    item_id: str
    rating: float
    text: str
    ordinal: int

    def __post_init__(self):
        if not math.isfinite(self.rating):
            raise CorpusError(f"rating must be finite, got {self.rating!r}")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.user_id, self.item_id)


@dataclass
class ReviewFile:
    records: list[ReviewRecord]
    diagnostics: list[str] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.diagnostics)


def _parse_line(line: str, lineno: int) -> ReviewRecord:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise ValueError(f"missing key(s) {', '.join(missing)}")
    rating = obj["rating"]
    if isinstance(rating, bool) or not isinstance(rating, (int, float)):
        raise ValueError(f"rating is not a number: {rating!r}")
    if not isinstance(obj["text"], str):
        raise ValueError("text is not a string")
    return ReviewRecord(str(obj["user"]), str(obj["item"]), float(rating), obj["text"], lineno)


def load_reviews(path: str | Path, strict: bool = False) -> ReviewFile:
    """Read a JSON Lines review file.

    Each record's ordinal is its 0-based line index. Malformed lines are skipped
    with a diagnostic naming the line (1-based), or raise in strict mode. Blank
    lines are ignored silently.
    """
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc

    records: list[ReviewRecord] = []
    diagnostics: list[str] = []
    with fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                records.append(_parse_line(line, lineno))
            except (ValueError, CorpusError) as exc:
                msg = f"{path}:{lineno + 1}: {exc}"
                if strict:
                    raise CorpusError(msg) from exc
                logger.warning("skipping malformed line %s", msg)
                diagnostics.append(msg)
    return ReviewFile(records, diagnostics)


def write_reviews(records: Iterable[ReviewRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"user": r.user_id, "item": r.item_id,
                                 "rating": r.rating, "text": r.text}) + "\n")


@dataclass
class CorpusSplit:
    train: list[ReviewRecord]
    valid: list[ReviewRecord]
    test: list[ReviewRecord]
    seed: int

    def __iter__(self):
        return iter((self.train, self.valid, self.test))

    def part(self, name: str) -> list[ReviewRecord]:
        if name not in ("train", "valid", "test"):
            raise KeyError(name)
        return getattr(self, name)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Train gets floor(r_train * n); the remainder is shared between valid and
    test with valid rounding up. Every split is guaranteed at least one record."""
    r_train, r_valid, r_test = ratios
    n_train = math.floor(r_train * n + 1e-9)
    rest = n - n_train
    n_valid = math.ceil(rest * r_valid / (r_valid + r_test) - 1e-9)
    sizes = [n_train, n_valid, rest - n_valid]
    for i in range(3):
        while sizes[i] == 0:
            donor = max(range(3), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes[0], sizes[1], sizes[2]


def split_corpus(records: Sequence[ReviewRecord], ratios: Sequence[float] = (0.8, 0.1, 0.1),
                 seed: int = 0, stratify: bool = False) -> CorpusSplit:
    """Shuffle under ``seed`` and cut into contiguous train/valid/test blocks.

    With ``stratify`` each user's reviews are spread across the blocks in
    proportion to the ratios (global block sizes are unchanged).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(records)
    if n < 3:
        raise CorpusError(f"need at least 3 records to populate train/valid/test, got {n}")

    ordered = sorted(records, key=lambda r: r.ordinal)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if stratify:
        by_user: dict[str, list[int]] = defaultdict(list)
        for pos in perm:
            by_user[ordered[pos].user_id].append(int(pos))
        rank = {}
        for members in by_user.values():
            for k, pos in enumerate(members):
                rank[pos] = (k + 0.5) / len(members)
        order = {int(pos): i for i, pos in enumerate(perm)}
        perm = np.array(sorted(rank, key=lambda p: (rank[p], order[p])))

    shuffled = [ordered[i] for i in perm]
    n_train, n_valid, _ = split_sizes(n, ratios)
    return CorpusSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train:n_train + n_valid],
        test=shuffled[n_train + n_valid:],
        seed=seed,
    )


@dataclass
class EntityDocument:
    entity_id: str
    tokens: list[str]
    source_ordinals: list[int]
    # token span [start, end) contributed by each source review, parallel to source_ordinals
    spans: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)


def build_documents(records: Iterable[ReviewRecord], tokenizer: Callable[[str], list[str]],
                    side: str, exclude: set[tuple[str, str]] | None = None,
                    entities: Iterable[str] | None = None) -> dict[str, EntityDocument]:
    """Merge each user's (or item's) reviews into one token document.

    Reviews are concatenated in ascending ordinal; reviews whose (user, item)
    pair is in ``exclude`` are dropped. Entities whose reviews are all excluded
    get an empty document, as does every id in ``entities`` with no reviews.
    """
    if side not in ("user", "item"):
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")
    exclude = exclude or set()
    grouped: dict[str, list[ReviewRecord]] = defaultdict(list)
    for r in records:
        grouped[r.user_id if side == "user" else r.item_id].append(r)

    docs: dict[str, EntityDocument] = {}
    for key, group in grouped.items():
        doc = EntityDocument(key, [], [])
        for r in sorted(group, key=lambda r: r.ordinal):
            if r.pair in exclude:
                continue
            toks = tokenizer(r.text)
            doc.spans.append((len(doc.tokens), len(doc.tokens) + len(toks)))
            doc.tokens.extend(toks)
            doc.source_ordinals.append(r.ordinal)
        docs[key] = doc
    for key in entities or ():
        docs.setdefault(key, EntityDocument(key, [], []))
    return docs


@dataclass
class CountBuckets:
    edges: list[int]
    assignment: dict[str, int]
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def n_buckets(self) -> int:
        return len(self.edges) + 1

    def members(self, bucket: int) -> list[str]:
        return [e for e, b in self.assignment.items() if b == bucket]

    def label(self, bucket: int) -> str:
        if bucket == len(self.edges):
            return f">{self.edges[-1]}"
        lo = self.edges[bucket - 1] + 1 if bucket > 0 else 1
        hi = self.edges[bucket]
        return str(hi) if lo == hi else f"{lo}-{hi}"


def bucket_index(k: int, edges: Sequence[int]) -> int:
    """Bucket j such that edges[j-1] < k <= edges[j]; past the last edge is the open bucket."""
    for j, edge in enumerate(edges):
        if k <= edge:
            return j
    return len(edges)


def bucket_by_count(records: Iterable[ReviewRecord], edges: Sequence[int]) -> tuple[CountBuckets, CountBuckets]:
    """Group users and items by their number of training reviews."""
    edges = [int(e) for e in edges]
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be non-empty and strictly ascending, got {edges}")
    records = list(records)
    out = []
    for attr in ("user_id", "item_id"):
        counts = Counter(getattr(r, attr) for r in records)
        out.append(CountBuckets(list(edges), {e: bucket_index(k, edges) for e, k in counts.items()}, dict(counts)))
    return out[0], out[1]
