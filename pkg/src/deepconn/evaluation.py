"""Mean squared error and split evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .data import Workspace
from .ingest import ReviewRecord
from .model import DeepConnModel


class RatingPredictor(Protocol):
    def predict_records(self, records: Sequence[ReviewRecord]) -> np.ndarray: ...


def mse(predictions, truths) -> float:
    """(1/N) * sum((truth - prediction)^2)."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("mse of zero observations is undefined")
    d = t - p
    return float(np.dot(d, d) / d.size)


@dataclass
class EvalReport:
    mse: float
    count: int
    coldstart_count: int = 0
    coldstart_mse: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class DeepConnPredictor:
    """Eval-mode predictions of a model over records, using the workspace's documents."""

    def __init__(self, model: DeepConnModel, workspace: Workspace, batch_size: int = 256):
        self.model = model
        self.workspace = workspace
        self.batch_size = batch_size

    @property
    def known_users(self):
        return self.workspace.known_users

    @property
    def known_items(self):
        return self.workspace.known_items

    def predict_records(self, records: Sequence[ReviewRecord], source: str = "eval") -> np.ndarray:
        out = []
        for batch in self.workspace.batches(records, self.batch_size, source):
            yhat, _ = self.model.predict(batch.user, batch.item, mode="eval")
            out.append(np.asarray(yhat, dtype=np.float64))
        return np.concatenate(out) if out else np.zeros(0)


def evaluate(predictor: RatingPredictor, records: Sequence[ReviewRecord], **predict_kwargs) -> EvalReport:
    """MSE over ``records``; pairs whose user or item has no training review are
    counted (and scored) separately as cold-start as well."""
    records = list(records)
    preds = predictor.predict_records(records, **predict_kwargs)
    truths = np.array([r.rating for r in records])
    known_u = getattr(predictor, "known_users", None)
    known_i = getattr(predictor, "known_items", None)
    cold = np.zeros(len(records), dtype=bool)
    if known_u is not None and known_i is not None:
        cold = np.array([r.user_id not in known_u or r.item_id not in known_i for r in records], dtype=bool)
    cold_mse = mse(preds[cold], truths[cold]) if cold.any() else None
    return EvalReport(mse(preds, truths), len(records), int(cold.sum()), cold_mse)
