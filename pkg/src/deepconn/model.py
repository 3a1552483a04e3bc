"""Two review towers coupled by a factorization-machine head, plus ablation variants."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .nnkernel import ParameterSet, StaleCacheError, Tower, TowerCache


class VariantKind(str, enum.Enum):
    FULL = "full"
    USER_ONLY = "user_only"
    ITEM_ONLY = "item_only"
    DOT_PRODUCT = "dot_product"

    @classmethod
    def parse(cls, value) -> VariantKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown variant {value!r}; choose from {[v.value for v in cls]}") from None


@dataclass
class ModelConfig:
    c: int = 300
    t: int = 3
    n1: int = 100
    n2: int = 50
    k: int | None = None          # FM factor size; None means |z| = 2 * n2
    n_max: int = 300
    dropout: float = 0.5
    variant: str = "full"
    seed: int = 0
    dtype: str = "float64"
    train_embeddings: bool = False
    fm_init_std: float = 0.01
    table_init_std: float = 0.1

    @property
    def z_dim(self) -> int:
        return 2 * self.n2

    @property
    def factors(self) -> int:
        return self.k if self.k is not None else self.z_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class FmHead:
    w0: np.ndarray     # shape (1,) so it can be updated in place
    w: np.ndarray      # (d,)
    V: np.ndarray      # (d, k)

    def __post_init__(self):
        if self.w0.shape != (1,) or self.V.ndim != 2 or self.w.shape != (self.V.shape[0],):
            raise ValueError(f"inconsistent FM shapes {self.w0.shape}, {self.w.shape}, {self.V.shape}")

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @classmethod
    def init(cls, d: int, k: int, global_bias: float, rng: np.random.Generator,
             std: float = 0.01, dtype=np.float64) -> FmHead:
        return cls(np.array([global_bias], dtype=dtype), np.zeros(d, dtype=dtype),
                   (rng.standard_normal((d, k)) * std).astype(dtype))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0, "w": self.w, "V": self.V}


def _factor_sums(z: np.ndarray, V: np.ndarray):
    # accumulate over inputs in a fixed order so each factor column is computed
    # independently of how many columns there are
    s = np.zeros((z.shape[0], V.shape[1]), dtype=np.result_type(z, V))
    q = np.zeros_like(s)
    V2 = V * V
    z2 = z * z
    for i in range(z.shape[1]):
        s += z[:, i, None] * V[i]
        q += z2[:, i, None] * V2[i]
    return s, q


def fm_forward(z: np.ndarray, head: FmHead) -> np.ndarray:
    """w0 + w.z + sum_{i<j} <v_i, v_j> z_i z_j via the O(d k) factorized form."""
    z = np.asarray(z)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.shape[1] != head.d:
        raise ValueError(f"FM head expects |z|={head.d}, got {zb.shape[1]}")
    s, q = _factor_sums(zb, head.V)
    pair = np.add.reduce(np.ascontiguousarray((0.5 * (s * s - q)).T), axis=0)
    linear = np.zeros(zb.shape[0], dtype=pair.dtype)
    for i in range(head.d):
        linear += head.w[i] * zb[:, i]
    y = head.w0[0] + linear + pair
    return y[0] if single else y


def fm_backward(z: np.ndarray, head: FmHead, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``upstream * y`` w.r.t. z and the head parameters.

    dy/dz_i uses the full symmetric interaction sum over j != i.
    Parameter gradients are summed over the batch.
    """
    z = np.asarray(z)
    single = z.ndim == 1
    zb = z[None] if single else z
    up = np.broadcast_to(np.asarray(upstream, dtype=zb.dtype), (zb.shape[0],))
    s = zb @ head.V                                            # (B, k)
    dz = head.w[None, :] + s @ head.V.T - zb * (head.V * head.V).sum(axis=1)[None, :]
    dz = dz * up[:, None]
    zu = zb * up[:, None]
    g_V = zu.T @ s - head.V * (zu * zb).sum(axis=0)[:, None]
    out = {"z": dz[0] if single else dz,
           "w0": np.array([up.sum()]),
           "w": zu.sum(axis=0),
           "V": g_V}
    return out


@dataclass
class EntityTable:
    """Free latent rows standing in for a removed tower."""

    ids: list[str]
    rows: np.ndarray   # (len(ids), n2)
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {e: i for i, e in enumerate(self.ids)}

    def lookup(self, entity_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.index[e] for e in entity_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown entity id {exc.args[0]!r} for latent table") from None


@dataclass
class SideBatch:
    """One side (user or item) of a batch.

    Either ``values`` (B, c, n) are given directly, or ``token_ids``/``scales``
    (B, n) are looked up in the model's trainable embedding. ``entities`` are
    the ids, needed when the side is a latent table.
    """

    mask: np.ndarray
    values: np.ndarray | None = None
    token_ids: np.ndarray | None = None
    scales: np.ndarray | None = None
    entities: list[str] | None = None

    @classmethod
    def from_matrix(cls, matrix, entity: str | None = None) -> SideBatch:
        return cls(mask=np.asarray(matrix.mask)[None], values=np.asarray(matrix.values)[None],
                   entities=[entity] if entity is not None else None)

    def __len__(self):
        return self.mask.shape[0]


@dataclass
class CorpusStats:
    users: list[str]
    items: list[str]
    mean_rating: float


@dataclass
class ForwardCache:
    version: int
    user: TowerCache | None
    item: TowerCache | None
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray | None
    yhat: np.ndarray
    user_rows: np.ndarray | None = None
    item_rows: np.ndarray | None = None
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    user_scales: np.ndarray | None = None
    item_scales: np.ndarray | None = None


class DeepConnModel:
    def __init__(self, config: ModelConfig, variant: VariantKind, user_tower: Tower | None,
                 item_tower: Tower | None, head: FmHead | None, user_table: EntityTable | None = None,
                 item_table: EntityTable | None = None, embedding: np.ndarray | None = None):
        self.config = config
        self.variant = variant
        self.user_tower = user_tower
        self.item_tower = item_tower
        self.head = head
        self.user_table = user_table
        self.item_table = item_table
        self.embedding = embedding
        self.dtype = np.dtype(config.dtype)

        self.params = ParameterSet()
        if user_tower is not None:
            self.params.add_all("user", user_tower.parameters())
        if item_tower is not None:
            self.params.add_all("item", item_tower.parameters())
        if user_table is not None:
            self.params.add("user_table", user_table.rows)
        if item_table is not None:
            self.params.add("item_table", item_table.rows)
        if head is not None:
            self.params.add_all("fm", head.parameters())
        if embedding is not None:
            self.params.add("embedding", embedding)

    # -- forward -----------------------------------------------------------------

    def _side_values(self, side: SideBatch) -> np.ndarray:
        if side.values is not None:
            return np.asarray(side.values, dtype=self.dtype)
        if self.embedding is None:
            raise ValueError("batch carries token ids but the model has no trainable embedding")
        vecs = self.embedding[side.token_ids] * side.scales[..., None].astype(self.dtype)
        return vecs.transpose(0, 2, 1)

    def _encode(self, tower, table, side, mode, rng):
        if tower is not None:
            x, cache = tower.forward(self._side_values(side), np.asarray(side.mask, dtype=self.dtype), mode, rng)
            return x, cache, None
        if side.entities is None:
            raise ValueError("latent-table side needs entity ids")
        rows = table.lookup(side.entities)
        return table.rows[rows], None, rows

    def predict(self, user, item, mode: str = "eval", rng: np.random.Generator | None = None):
        """Predicted ratings for a batch and the cache needed by ``loss_and_backward``."""
        if not isinstance(user, SideBatch):
            user = SideBatch.from_matrix(user)
        if not isinstance(item, SideBatch):
            item = SideBatch.from_matrix(item)
        x, ucache, urows = self._encode(self.user_tower, self.user_table, user, mode, rng)
        y, icache, irows = self._encode(self.item_tower, self.item_table, item, mode, rng)
        if self.variant is VariantKind.DOT_PRODUCT:
            z = None
            yhat = np.einsum("bi,bi->b", x, y)
        else:
            z = np.concatenate([x, y], axis=1)
            yhat = fm_forward(z, self.head)
        cache = ForwardCache(self.params.version, ucache, icache, x, y, z, yhat, urows, irows,
                             user.token_ids, item.token_ids, user.scales, item.scales)
        return yhat, cache

    # -- backward ----------------------------------------------------------------

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> None:
        """Accumulate gradients of ``sum(upstream * yhat)`` into ``self.params.grads``."""
        if cache.version != self.params.version:
            raise StaleCacheError("forward cache predates the latest parameter update")
        grads = self.params.grads
        if self.variant is VariantKind.DOT_PRODUCT:
            dx = upstream[:, None] * cache.y
            dy = upstream[:, None] * cache.x
        else:
            g = fm_backward(cache.z, self.head, upstream)
            for name in ("w0", "w", "V"):
                grads[f"fm.{name}"] += g[name]
            n2 = cache.x.shape[1]
            dx, dy = g["z"][:, :n2], g["z"][:, n2:]

        want_input = self.embedding is not None
        for prefix, tower_cache, d, rows, ids, scales in (
                ("user", cache.user, dx, cache.user_rows, cache.user_ids, cache.user_scales),
                ("item", cache.item, dy, cache.item_rows, cache.item_ids, cache.item_scales)):
            if tower_cache is not None:
                tgrads, dV = tower_cache.tower.backward(tower_cache, d, input_grad=want_input)
                self.params.accumulate(prefix, tgrads)
                if dV is not None and ids is not None:
                    contrib = dV.transpose(0, 2, 1) * scales[..., None]
                    np.add.at(grads["embedding"], ids, contrib)
            else:
                np.add.at(grads[f"{prefix}_table"], rows, d)

    def loss_and_backward(self, cache: ForwardCache, ratings) -> float:
        """Mean squared error of the batch; gradients are accumulated into ``params.grads``."""
        ratings = np.asarray(ratings, dtype=self.dtype).reshape(-1)
        resid = cache.yhat - ratings
        loss = float(np.mean(resid * resid))
        if not np.isfinite(loss):
            bad = int(np.count_nonzero(~np.isfinite(cache.yhat)))
            raise FloatingPointError(f"non-finite loss: {bad} of {resid.size} predictions are not finite")
        self.backward(cache, 2.0 * resid / resid.size)
        return loss

    def __repr__(self):
        return (f"DeepConnModel(variant={self.variant.value}, params={self.params.size()}, "
                f"c={self.config.c}, t={self.config.t}, n1={self.config.n1}, n2={self.config.n2})")


def make_variant(kind, config: ModelConfig, stats: CorpusStats, vocab_rows: int | None = None,
                 embedding_init: np.ndarray | None = None) -> DeepConnModel:
    """Build the requested architecture with seeded initial parameters.

    ``embedding_init`` (lookup rows incl. OOV and pad) is required when
    ``config.train_embeddings`` is set.
    """
    kind = VariantKind.parse(kind)
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng([config.seed, 0x1217])

    def tower():
        return Tower.init(config.c, config.t, config.n1, config.n2, rng, config.dropout, dtype)

    def table(ids):
        rows = (rng.standard_normal((len(ids), config.n2)) * config.table_init_std).astype(dtype)
        return EntityTable(list(ids), rows)

    user_tower = item_tower = user_table = item_table = head = None
    if kind is VariantKind.ITEM_ONLY:
        user_table = table(stats.users)
    else:
        user_tower = tower()
    if kind is VariantKind.USER_ONLY:
        item_table = table(stats.items)
    else:
        item_tower = tower()
    if kind is not VariantKind.DOT_PRODUCT:
        head = FmHead.init(config.z_dim, config.factors, stats.mean_rating, rng, config.fm_init_std, dtype)

    embedding = None
    if config.train_embeddings:
        if embedding_init is None:
            raise ValueError("train_embeddings requires initial embedding rows")
        embedding = np.array(embedding_init, dtype=dtype)
    return DeepConnModel(config, kind, user_tower, item_tower, head, user_table, item_table, embedding)
