"""Mini-batch RMSprop training, early stopping and checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Workspace
from .evaluation import DeepConnPredictor, evaluate
from .ingest import ReviewRecord
from .model import CorpusStats, DeepConnModel, ModelConfig, VariantKind, make_variant
from .nnkernel import ParameterSet

logger = logging.getLogger(__name__)

MAGIC = b"DCNNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.002
    batch_size: int = 100
    eps: float = 1e-8
    # weight on the fresh squared gradient and on the running history
    grad_weight: float = 0.9
    history_weight: float = 0.1
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_weight <= 0 or self.history_weight <= 0 or \
                abs(self.grad_weight + self.history_weight - 1.0) > 1e-12:
            raise ValueError("RMSprop weights must be positive and sum to 1")

    @classmethod
    def conventional(cls, **kwargs) -> TrainConfig:
        """Standard RMSprop weighting: 0.1 on the new squared gradient, 0.9 on history."""
        return cls(grad_weight=0.1, history_weight=0.9, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def rmsprop_step(params: ParameterSet, config: TrainConfig) -> None:
    """r <- a*g^2 + b*r;  theta <- theta - lr / (sqrt(r) + eps) * g;  then clear g."""
    for name, theta in params.params.items():
        g = params.grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
        r = params.accum[name]
        r *= config.history_weight
        r += config.grad_weight * (g * g)
        theta -= (config.lr / (np.sqrt(r) + config.eps)) * g
    params.zero_grad()
    params.version += 1


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Example order of one epoch: a pure function of (seed, epoch, n)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    return [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    batch_sizes: list[int]


def _apply_weight_decay(model: DeepConnModel, wd: float) -> None:
    if wd:
        for name in ("fm.w", "fm.V"):
            if name in model.params.params:
                model.params.grads[name] += wd * model.params.params[name]


def train_epoch(model: DeepConnModel, workspace: Workspace, records: Sequence[ReviewRecord],
                config: TrainConfig, epoch: int = 0) -> EpochStats:
    """One pass over ``records`` in shuffled mini-batches; the last short batch is kept."""
    records = sorted(records, key=lambda r: r.ordinal)
    order = epoch_order(len(records), config.seed, epoch)
    drop_rng = np.random.default_rng([config.seed, epoch, 0xD0])
    total, sizes = 0.0, []
    model.params.zero_grad()
    for sl in batch_slices(len(records), config.batch_size):
        batch = workspace.batch([records[i] for i in order[sl]], source="train")
        _, cache = model.predict(batch.user, batch.item, mode="train", rng=drop_rng)
        loss = model.loss_and_backward(cache, batch.ratings)
        _apply_weight_decay(model, config.weight_decay)
        rmsprop_step(model.params, config)
        total += loss * len(batch)
        sizes.append(len(batch))
    return EpochStats(epoch, total / max(len(records), 1), sizes)


@dataclass
class FitResult:
    model: DeepConnModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_mse: float = float("inf")
    status: str = "completed"


def snapshot(params: ParameterSet) -> dict[str, np.ndarray]:
    return {name: p.copy() for name, p in params.params.items()}


def restore(params: ParameterSet, state: dict[str, np.ndarray]) -> None:
    for name, p in params.params.items():
        np.copyto(p, state[name])
    params.version += 1


def fit(model: DeepConnModel, workspace: Workspace, config: TrainConfig,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train with early stopping on validation MSE (target review excluded).

    Stops once ``patience + 1`` consecutive epochs fail to improve, or at
    ``max_epochs``; the model is left holding the best snapshot.
    """
    valid = workspace.split.valid
    if not valid:
        raise ValueError("validation split is empty")
    predictor = DeepConnPredictor(model, workspace)
    result = FitResult(model)
    best_state = snapshot(model.params)
    stale = 0
    for epoch in range(config.max_epochs):
        try:
            stats = train_epoch(model, workspace, workspace.split.train, config, epoch)
            vmse = evaluate(predictor, valid).mse
        except FloatingPointError as exc:
            logger.error("training diverged at epoch %d: %s", epoch, exc)
            result.status = "diverged"
            break
        row = {"epoch": epoch, "train_loss": stats.train_loss, "valid_mse": vmse}
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        logger.info("epoch %d train_loss %.6f valid_mse %.6f", epoch, stats.train_loss, vmse)
        if not np.isfinite(vmse):
            result.status = "diverged"
            break
        if vmse < result.best_valid_mse:
            result.best_valid_mse, result.best_epoch = vmse, epoch
            best_state = snapshot(model.params)
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                result.status = "early_stopped"
                break
    restore(model.params, best_state)
    return result


# -- checkpoints ------------------------------------------------------------------

def _header(model: DeepConnModel, vocab_fingerprint: str, epoch: int, metrics: dict | None,
            extra: dict | None) -> dict:
    dtype = "<f4" if model.dtype == np.float32 else "<f8"
    header = {
        "format": "deepconn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "config": model.config.to_dict(),
        "vocab_fingerprint": vocab_fingerprint,
        "epoch": epoch,
        "metrics": metrics or {},
        "dtype": dtype,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.params.params.items()],
        "users": model.user_table.ids if model.user_table is not None else None,
        "items": model.item_table.ids if model.item_table is not None else None,
    }
    if extra:
        header["extra"] = extra
    return header


def save_checkpoint(model: DeepConnModel, path: str | Path, vocab_fingerprint: str = "",
                    epoch: int = 0, metrics: dict | None = None, extra: dict | None = None) -> None:
    """Write magic, u32 version, u64 header length, JSON header, raw little-endian payload.

    The payload uses the model's precision (float32 models give the 32-bit layout).
    """
    header = _header(model, vocab_fingerprint, epoch, metrics, extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in model.params.params.values():
            fh.write(np.ascontiguousarray(p, dtype=header["dtype"]).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 20 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    return header, data[20 + hlen:]


def load_checkpoint(path: str | Path, vocab_fingerprint: str | None = None) -> tuple[DeepConnModel, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    header, payload = read_checkpoint(path)
    if vocab_fingerprint is not None and header["vocab_fingerprint"] != vocab_fingerprint:
        raise CheckpointError(
            f"{path}: vocabulary fingerprint {header['vocab_fingerprint']} does not match {vocab_fingerprint}")
    dtype = np.dtype(header["dtype"])
    expected = sum(int(np.prod(s["shape"])) for s in header["params"]) * dtype.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")

    config = ModelConfig.from_dict(header["config"])
    shapes = {s["name"]: tuple(s["shape"]) for s in header["params"]}
    stats = CorpusStats(header.get("users") or [], header.get("items") or [], 0.0)
    emb = np.zeros(shapes["embedding"]) if "embedding" in shapes else None
    model = make_variant(VariantKind.parse(header["variant"]), config, stats, embedding_init=emb)
    if list(model.params.params) != [s["name"] for s in header["params"]]:
        raise CheckpointError(f"{path}: parameter layout does not match the declared variant")
    offset = 0
    for name, p in model.params.params.items():
        if p.shape != shapes[name]:
            raise CheckpointError(f"{path}: parameter {name} has shape {shapes[name]}, expected {p.shape}")
        n = p.size * dtype.itemsize
        np.copyto(p, np.frombuffer(payload, dtype=dtype, count=p.size, offset=offset).reshape(p.shape))
        offset += n
    return model, header
