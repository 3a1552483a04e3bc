"""End-to-end gradient check on a tiny model instance."""

from __future__ import annotations

import numpy as np

from .model import CorpusStats, DeepConnModel, ModelConfig, SideBatch, make_variant
from .nnkernel import GradCheckResult, grad_check

TINY = dict(c=4, t=2, n1=3, n2=2, k=2, n_max=5)


def tiny_instance(variant="full", seed: int = 0, train_embeddings: bool = False, dropout: float = 0.0,
                  batch: int = 3):
    """A tiny model with random, well-conditioned parameters and a random batch.

    Biases are shifted positive so no ReLU sits exactly at its kink, which
    would make central differences meaningless. One user document is
    partially padded to exercise masking.
    """
    rng = np.random.default_rng([seed, 0x6C])
    cfg = ModelConfig(**TINY, dropout=dropout, seed=seed, train_embeddings=train_embeddings)
    users, items = ["ua", "ub", "uc"], ["ia", "ib"]
    vocab_rows = 6
    emb = np.vstack([rng.normal(size=(vocab_rows + 1, cfg.c)), np.zeros((1, cfg.c))])
    model = make_variant(variant, cfg, CorpusStats(users, items, 3.0), embedding_init=emb)
    for name, p in model.params.params.items():
        if name == "embedding":
            continue
        p[...] = rng.normal(size=p.shape) * 0.5
        if name.endswith("biases") or name.endswith("dense.bias"):
            p += 1.0

    n = cfg.n_max
    mask = np.ones((batch, n))
    mask[min(1, batch - 1), 3:] = 0.0

    def side(m, ents):
        if train_embeddings:
            ids = rng.integers(0, vocab_rows + 1, size=(batch, n))
            ids[m == 0] = vocab_rows + 1
            return SideBatch(mask=m, token_ids=ids, scales=m.copy(), entities=ents)
        return SideBatch(mask=m, values=rng.normal(size=(batch, cfg.c, n)) * m[:, None, :], entities=ents)

    user = side(mask, [users[k % 3] for k in range(batch)])
    item = side(np.ones((batch, n)), [items[k % 2] for k in range(batch)])
    ratings = rng.uniform(1, 5, size=batch)
    return model, user, item, ratings


def model_gradcheck(model: DeepConnModel, user: SideBatch, item: SideBatch, ratings: np.ndarray,
                    eps: float = 1e-5, tolerance: float | None = None, dropout_seed: int | None = None,
                    corrupt: str | None = None) -> GradCheckResult:
    """Compare ``loss_and_backward`` against central differences of the batch MSE.

    With ``dropout_seed`` the forward runs in train mode with the dropout mask
    regenerated identically on every evaluation. ``corrupt`` names a parameter
    whose analytic gradient is doubled (self-test of the checker).
    """
    mode = "eval" if dropout_seed is None else "train"

    def rng():
        return None if dropout_seed is None else np.random.default_rng(dropout_seed)

    def loss():
        yhat, _ = model.predict(user, item, mode=mode, rng=rng())
        return float(np.mean((yhat - ratings) ** 2))

    model.params.zero_grad()
    _, cache = model.predict(user, item, mode=mode, rng=rng())
    model.loss_and_backward(cache, ratings)
    analytic = {k: v.copy() for k, v in model.params.grads.items()}
    model.params.zero_grad()
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 2.0
    return grad_check(loss, model.params.params, analytic, eps, tolerance)


def tiny_gradcheck(variant="full", seed: int = 0, train_embeddings: bool = False,
                   tolerance: float | None = 1e-4) -> GradCheckResult:
    model, user, item, ratings = tiny_instance(variant, seed, train_embeddings)
    return model_gradcheck(model, user, item, ratings, tolerance=tolerance)
