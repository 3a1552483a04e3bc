"""Rating-only reference models: global mean and ALS matrix factorization."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ingest import ReviewRecord

logger = logging.getLogger(__name__)

MF_FACTOR_GRID = (25, 50, 100, 150, 200)
MF_REG_GRID = (0.001, 0.01, 0.1, 1.0)


@dataclass
class GlobalMean:
    mean: float
    known_users: set = field(default_factory=set)
    known_items: set = field(default_factory=set)

    def predict(self, user, item) -> float:
        return self.mean

    def predict_records(self, records: Sequence[ReviewRecord]) -> np.ndarray:
        return np.full(len(records), self.mean)


def fit_global_mean(train: Sequence[ReviewRecord]) -> GlobalMean:
    if not train:
        raise ValueError("cannot fit a global mean on an empty training set")
    return GlobalMean(float(np.mean([r.rating for r in train])),
                      {r.user_id for r in train}, {r.item_id for r in train})


@dataclass
class MfModel:
    user_factors: np.ndarray    # (|users|, f)
    item_factors: np.ndarray    # (|items|, f)
    global_mean: float
    reg: float
    user_index: dict[str, int]
    item_index: dict[str, int]
    objective_trace: list[float] = field(default_factory=list)

    @property
    def f(self) -> int:
        return self.user_factors.shape[1]

    @property
    def known_users(self):
        return self.user_index.keys()

    @property
    def known_items(self):
        return self.item_index.keys()

    def predict_records(self, records: Sequence[ReviewRecord]) -> np.ndarray:
        return np.array([predict_mf(self, r.user_id, r.item_id) for r in records])


def predict_mf(model: MfModel, user, item) -> float:
    """mu + p_u . q_i; ids unseen in training contribute a zero factor."""
    u = model.user_index.get(user)
    i = model.item_index.get(item)
    if u is None or i is None:
        return model.global_mean
    return float(model.global_mean + model.user_factors[u] @ model.item_factors[i])


def mf_objective(model: MfModel, users: np.ndarray, items: np.ndarray, ratings: np.ndarray) -> float:
    pred = model.global_mean + np.einsum("nf,nf->n", model.user_factors[users], model.item_factors[items])
    resid = ratings - pred
    return float(resid @ resid + model.reg * (np.sum(model.user_factors ** 2) + np.sum(model.item_factors ** 2)))


def _solve_rows(target: np.ndarray, other: np.ndarray, groups: list[np.ndarray], cols: np.ndarray,
                resid: np.ndarray, reg: float) -> None:
    eye = reg * np.eye(other.shape[1])
    for row, members in enumerate(groups):
        M = other[cols[members]]
        A = M.T @ M + eye
        try:
            target[row] = np.linalg.solve(A, M.T @ resid[members])
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular ridge system for row {row}") from exc


def fit_mf_als(train: Sequence[ReviewRecord], f: int = 50, reg: float = 0.1, sweeps: int = 20,
               seed: int = 0, init_std: float = 0.1) -> MfModel:
    """Alternating exact ridge solves for user rows then item rows.

    Minimizes sum (r - mu - p_u.q_i)^2 + reg (||P||^2 + ||Q||^2); the objective
    after every half-sweep is recorded in ``objective_trace`` (first entry is the
    initial value).
    """
    if f < 1:
        raise ValueError("rank f must be >= 1")
    if reg <= 0:
        raise ValueError("reg must be > 0 so every ridge system is solvable")
    if not train:
        raise ValueError("cannot fit MF on an empty training set")
    user_index = {u: k for k, u in enumerate(dict.fromkeys(r.user_id for r in train))}
    item_index = {i: k for k, i in enumerate(dict.fromkeys(r.item_id for r in train))}
    users = np.array([user_index[r.user_id] for r in train])
    items = np.array([item_index[r.item_id] for r in train])
    ratings = np.array([r.rating for r in train], dtype=np.float64)
    mu = float(ratings.mean())

    rng = np.random.default_rng([seed, 0xA15])
    model = MfModel(rng.standard_normal((len(user_index), f)) * init_std,
                    rng.standard_normal((len(item_index), f)) * init_std,
                    mu, reg, user_index, item_index)
    by_user = [np.flatnonzero(users == u) for u in range(len(user_index))]
    by_item = [np.flatnonzero(items == i) for i in range(len(item_index))]
    resid = ratings - mu
    model.objective_trace.append(mf_objective(model, users, items, ratings))
    for sweep in range(sweeps):
        _solve_rows(model.user_factors, model.item_factors, by_user, items, resid, reg)
        model.objective_trace.append(mf_objective(model, users, items, ratings))
        _solve_rows(model.item_factors, model.user_factors, by_item, users, resid, reg)
        model.objective_trace.append(mf_objective(model, users, items, ratings))
        logger.debug("ALS sweep %d objective %.6g", sweep, model.objective_trace[-1])
    return model


@dataclass
class GridResult:
    model: MfModel
    f: int
    reg: float
    valid_mse: float
    table: list[dict]


def grid_search_mf(train: Sequence[ReviewRecord], valid: Sequence[ReviewRecord],
                   factors=MF_FACTOR_GRID, regs=MF_REG_GRID, sweeps: int = 20, seed: int = 0) -> GridResult:
    """Pick (f, reg) by validation MSE; ties keep the first grid point."""
    truths = np.array([r.rating for r in valid])
    best = None
    table = []
    for f, reg in itertools.product(factors, regs):
        model = fit_mf_als(train, f, reg, sweeps, seed)
        err = float(np.mean((model.predict_records(valid) - truths) ** 2))
        table.append({"f": f, "reg": reg, "valid_mse": err})
        if best is None or err < best.valid_mse:
            best = GridResult(model, f, reg, err, table)
    return best
