"""Variant comparison table and MSE-reduction-by-review-count report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RepConfig, Workspace
from .evaluation import DeepConnPredictor, RatingPredictor, evaluate, mse
from .ingest import CorpusSplit, ReviewRecord, bucket_by_count
from .model import ModelConfig, make_variant
from .train import TrainConfig, fit

logger = logging.getLogger(__name__)

DEFAULT_BUCKET_EDGES = (1, 2, 3, 4, 5, 10, 50)

# (row label, architecture, input representation), in table order
ABLATION_VARIANTS = (
    ("user_only", "user_only", "embed"),
    ("item_only", "item_only", "embed"),
    ("tfidf", "full", "tfidf"),
    ("random", "full", "random"),
    ("dot_product", "dot_product", "embed"),
    ("full", "full", "embed"),
)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AblationRow:
    variant: str
    architecture: str
    representation: str
    status: str = "ok"
    valid_mse: float | None = None
    test_mse: float | None = None
    test_count: int = 0
    coldstart_count: int = 0
    epochs: int = 0
    best_epoch: int = -1
    shared_fingerprint: str = ""
    test_pairs: str = ""


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def best(self) -> AblationRow | None:
        ok = [r for r in self.rows if r.test_mse is not None]
        return min(ok, key=lambda r: r.test_mse) if ok else None

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(AblationRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])
        return buf.getvalue()

    def to_text(self) -> str:
        best = self.best()
        lines = [f"{'variant':<14}{'input':<8}{'test MSE':>14}{'valid MSE':>14}  status",
                 "-" * 60]
        for r in self.rows:
            test = _fmt(r.test_mse)
            if best is not None and r is best:
                test = f"**{test}**"
            lines.append(f"{r.variant:<14}{r.representation:<8}{test:>14}{_fmt(r.valid_mse):>14}  {r.status}")
        lines.append("best result in **bold**")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path, stem: str = "ablation") -> None:
        directory = Path(directory)
        (directory / f"{stem}.json").write_text(self.to_json())
        (directory / f"{stem}.csv").write_text(self.to_csv())
        (directory / f"{stem}.txt").write_text(self.to_text())


def ablation_suite(split: CorpusSplit, model_config: ModelConfig, train_config: TrainConfig,
                   rep_config: RepConfig, variants=ABLATION_VARIANTS) -> AblationTable:
    """Train and test every variant on the same split, seeds and epoch budget.

    Only the architecture or input representation changes between rows; the
    ``shared_fingerprint`` column hashes everything else and must agree across
    rows. A variant that raises is recorded as failed and the suite goes on.
    """
    shared = {
        "model": {k: v for k, v in model_config.to_dict().items() if k != "variant"},
        "train": train_config.to_dict(),
        "rep": {k: v for k, v in rep_config.to_dict().items() if k != "rep"},
        "split_seed": split.seed,
    }
    fingerprint = _digest(shared)
    test_pairs = _digest([r.ordinal for r in split.test])
    workspaces: dict[str, Workspace] = {}
    rows = []
    for label, arch, rep in variants:
        row = AblationRow(label, arch, rep, shared_fingerprint=fingerprint, test_pairs=test_pairs)
        try:
            if rep not in workspaces:
                workspaces[rep] = Workspace(split, replace(rep_config, rep=rep), dtype=model_config.dtype,
                                            token_ids=model_config.train_embeddings and rep != "random",
                                            t=model_config.t)
            ws = workspaces[rep]
            cfg = replace(model_config, variant=arch,
                          train_embeddings=model_config.train_embeddings and rep != "random")
            model = make_variant(arch, cfg, ws.stats(), embedding_init=ws.lookup)
            result = fit(model, ws, train_config)
            report = evaluate(DeepConnPredictor(model, ws), split.test)
            row.valid_mse = result.best_valid_mse
            row.test_mse = report.mse
            row.test_count = report.count
            row.coldstart_count = report.coldstart_count
            row.epochs = len(result.history)
            row.best_epoch = result.best_epoch
            row.status = "ok" if result.status != "diverged" else "diverged"
        except Exception as exc:  # a failing variant must not sink the table
            logger.warning("variant %s failed: %s", label, exc)
            row.status = f"failed: {exc}"
        rows.append(row)
    return AblationTable(rows)


@dataclass
class BucketRow:
    side: str
    bucket: int            # -1 holds entities with no training review
    label: str
    members: int
    pairs: int
    model_mse: float | None
    baseline_mse: float | None
    reduction: float | None


@dataclass
class BucketReport:
    edges: list[int]
    rows: list[BucketRow] = field(default_factory=list)

    def side(self, name: str) -> list[BucketRow]:
        return [r for r in self.rows if r.side == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(BucketRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"edges": self.edges, "rows": [asdict(r) for r in self.rows]},
                          indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'side':<6}{'reviews':<9}{'members':>8}{'pairs':>7}{'model':>12}{'baseline':>12}{'reduction':>12}",
                 "-" * 66]
        for r in self.rows:
            lines.append(f"{r.side:<6}{r.label:<9}{r.members:>8}{r.pairs:>7}{_fmt(r.model_mse):>12}"
                         f"{_fmt(r.baseline_mse):>12}{_fmt(r.reduction):>12}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path, stem: str = "report") -> None:
        directory = Path(directory)
        (directory / f"{stem}.json").write_text(self.to_json())
        (directory / f"{stem}.csv").write_text(self.to_csv())
        (directory / f"{stem}.txt").write_text(self.to_text())


def sparsity_report(model: RatingPredictor, baseline: RatingPredictor, test: Sequence[ReviewRecord],
                    train: Sequence[ReviewRecord], edges: Sequence[int] = DEFAULT_BUCKET_EDGES) -> BucketReport:
    """Per-bucket MSE of model and baseline on ``test``, grouped by how many
    training reviews the pair's user (resp. item) has. Reduction is
    baseline MSE minus model MSE."""
    test = list(test)
    user_buckets, item_buckets = bucket_by_count(train, edges)
    truths = np.array([r.rating for r in test])
    pm = np.asarray(model.predict_records(test), dtype=np.float64)
    pb = np.asarray(baseline.predict_records(test), dtype=np.float64)
    report = BucketReport(list(user_buckets.edges))
    for side, buckets, key in (("user", user_buckets, "user_id"), ("item", item_buckets, "item_id")):
        groups: dict[int, list[int]] = defaultdict(list)
        members: dict[int, set] = defaultdict(set)
        for n, r in enumerate(test):
            entity = getattr(r, key)
            b = buckets.assignment.get(entity, -1)
            groups[b].append(n)
            members[b].add(entity)
        for b in [-1] + list(range(buckets.n_buckets)):
            if b == -1 and not groups.get(-1):
                continue
            idx = groups.get(b, [])
            label = "0" if b == -1 else buckets.label(b)
            if not idx:
                report.rows.append(BucketRow(side, b, label, 0, 0, None, None, None))
                continue
            m = mse(pm[idx], truths[idx])
            base = mse(pb[idx], truths[idx])
            report.rows.append(BucketRow(side, b, label, len(members[b]), len(idx), m, base, base - m))
    return report
