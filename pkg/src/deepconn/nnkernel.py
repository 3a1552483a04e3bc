"""Numeric primitives of one text tower, forward and backward, plus gradient checking.

Arrays follow the document-matrix layout with an optional leading batch axis:
documents ``(B, c, n)``, masks ``(B, n)``, kernels ``(n1, c, t)``, feature maps
``(B, n1, n - t + 1)``, pooled features ``(B, n1)``, tower outputs ``(B, n2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class StaleCacheError(RuntimeError):
    """A backward pass was given a cache that does not match the current parameters."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class ConvLayer:
    kernels: np.ndarray   # (n1, c, t)
    biases: np.ndarray    # (n1,)

    def __post_init__(self):
        if self.kernels.ndim != 3 or self.biases.shape != (self.kernels.shape[0],):
            raise ValueError(f"bad conv shapes {self.kernels.shape}, {self.biases.shape}")
        if self.t < 1 or self.n1 < 1:
            raise ValueError("conv layer needs t >= 1 and n1 >= 1")

    @property
    def n1(self) -> int:
        return self.kernels.shape[0]

    @property
    def c(self) -> int:
        return self.kernels.shape[1]

    @property
    def t(self) -> int:
        return self.kernels.shape[2]

    @classmethod
    def init(cls, c: int, t: int, n1: int, rng: np.random.Generator, dtype=np.float64) -> ConvLayer:
        return cls(glorot_uniform(rng, (n1, c, t), c * t, n1 * t, dtype), np.zeros(n1, dtype=dtype))


@dataclass
class DenseLayer:
    weight: np.ndarray    # (n2, n1)
    bias: np.ndarray      # (n2,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad dense shapes {self.weight.shape}, {self.bias.shape}")

    @property
    def n2(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n1: int, n2: int, rng: np.random.Generator, dtype=np.float64) -> DenseLayer:
        return cls(glorot_uniform(rng, (n2, n1), n1, n2, dtype), np.zeros(n2, dtype=dtype))


@dataclass
class FeatureMaps:
    values: np.ndarray              # post-ReLU, zero on windows made only of padding
    pre: np.ndarray                 # pre-activation
    valid: np.ndarray               # (..., L) bool, window touches at least one real token
    argmax: np.ndarray | None = None


def _batched(V, mask):
    """Accept a DocumentMatrix or raw arrays; return (V, mask, was_single)."""
    if mask is None and hasattr(V, "values") and hasattr(V, "mask"):
        V, mask = V.values, V.mask
    V = np.asarray(V)
    single = V.ndim == 2
    if single:
        V = V[None]
    if mask is None:
        mask = np.ones((V.shape[0], V.shape[2]), dtype=V.dtype)
    else:
        mask = np.asarray(mask).reshape(V.shape[0], V.shape[2])
    return V, mask, single


def window_validity(mask: np.ndarray, t: int) -> np.ndarray:
    return sliding_window_view(mask, t, axis=-1).max(axis=-1) > 0


def conv_forward(V, layer: ConvLayer, mask=None) -> FeatureMaps:
    """Valid convolution of every kernel over the document, followed by ReLU.

    ``z[j, p] = relu(sum(K_j * V[:, p:p+t]) + b_j)`` for ``p < n - t + 1``.
    Windows made only of padding are flagged invalid and hold 0.
    """
    V, mask, single = _batched(V, mask)
    n, t = V.shape[2], layer.t
    if V.shape[1] != layer.c:
        raise ValueError(f"document has c={V.shape[1]}, kernels expect c={layer.c}")
    if n < t:
        raise ValueError(f"document width {n} is smaller than window size {t}")
    windows = sliding_window_view(V, t, axis=2)                 # (B, c, L, t)
    pre = np.tensordot(windows, layer.kernels, axes=([1, 3], [1, 2]))   # (B, L, n1)
    pre = pre.transpose(0, 2, 1) + layer.biases[None, :, None]
    valid = window_validity(mask, t)
    values = np.where(valid[:, None, :], relu(pre), 0.0)
    if single:
        return FeatureMaps(values[0], pre[0], valid[0])
    return FeatureMaps(values, pre, valid)


def maxpool(fm: FeatureMaps) -> np.ndarray:
    """Max over valid windows per kernel; first maximum wins ties.

    Kernels with no valid window (empty document) pool to 0 and get argmax -1.
    """
    masked = np.where(fm.valid[..., None, :], fm.values, -np.inf)
    argmax = np.argmax(masked, axis=-1)
    any_valid = fm.valid.any(axis=-1)[..., None]
    argmax = np.where(any_valid, argmax, -1)
    pooled = np.take_along_axis(fm.values, np.maximum(argmax, 0)[..., None], axis=-1)[..., 0]
    pooled = np.where(any_valid, pooled, 0.0)
    fm.argmax = argmax
    return pooled


def dense_forward(O: np.ndarray, layer: DenseLayer) -> np.ndarray:
    """x = relu(W O + g)."""
    O = np.asarray(O)
    if O.shape[-1] != layer.weight.shape[1]:
        raise ValueError(f"dense layer expects {layer.weight.shape[1]} inputs, got {O.shape[-1]}")
    return relu(O @ layer.weight.T + layer.bias)


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(x', mask)``; mask is None when nothing is dropped."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


@dataclass
class TowerCache:
    tower: "Tower"
    V: np.ndarray
    mask: np.ndarray
    fm: FeatureMaps
    pooled: np.ndarray
    hidden_pre: np.ndarray
    keep: np.ndarray | None
    x: np.ndarray
    shapes: tuple = ()


class Tower:
    """One CNN branch: convolution, max-pooling, fully connected layer, dropout."""

    def __init__(self, conv: ConvLayer, dense: DenseLayer, dropout_rate: float = 0.0):
        if dense.weight.shape[1] != conv.n1:
            raise ValueError("dense input size must equal the number of kernels")
        self.conv = conv
        self.dense = dense
        self.dropout_rate = dropout_rate

    @classmethod
    def init(cls, c: int, t: int, n1: int, n2: int, rng: np.random.Generator,
             dropout_rate: float = 0.0, dtype=np.float64) -> Tower:
        return cls(ConvLayer.init(c, t, n1, rng, dtype), DenseLayer.init(n1, n2, rng, dtype), dropout_rate)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"conv.kernels": self.conv.kernels, "conv.biases": self.conv.biases,
                "dense.weight": self.dense.weight, "dense.bias": self.dense.bias}

    def _shapes(self):
        return tuple(p.shape for p in self.parameters().values())

    def forward(self, V: np.ndarray, mask: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, TowerCache]:
        V, mask, _ = _batched(V, mask)
        fm = conv_forward(V, self.conv, mask)
        pooled = maxpool(fm)
        hidden_pre = pooled @ self.dense.weight.T + self.dense.bias
        x, keep = dropout(relu(hidden_pre), self.dropout_rate, mode, rng)
        return x, TowerCache(self, V, mask, fm, pooled, hidden_pre, keep, x, self._shapes())

    def backward(self, cache: TowerCache, dx: np.ndarray, input_grad: bool = False):
        return tower_backward(cache, dx, input_grad)


def tower_backward(cache: TowerCache, dx: np.ndarray, input_grad: bool = False):
    """Gradients of a scalar objective given ``dx = d objective / d x``.

    Returns ``(grads, dV)``: grads keyed like ``Tower.parameters()``, dV the
    input gradient (zero at padded positions) or None.
    """
    tower = cache.tower
    if cache.shapes != tower._shapes():
        raise StaleCacheError("tower parameters changed shape since the forward pass")
    dx = np.asarray(dx)
    if dx.shape != cache.x.shape:
        raise StaleCacheError(f"upstream gradient shape {dx.shape} does not match output {cache.x.shape}")
    conv, dense = tower.conv, tower.dense

    if cache.keep is not None:
        dx = dx * cache.keep
    dh = dx * (cache.hidden_pre > 0)                       # (B, n2)
    g_bias = dh.sum(axis=0)
    g_weight = dh.T @ cache.pooled                          # (n2, n1)
    dO = dh @ dense.weight                                  # (B, n1)

    # max-pool routes each kernel's gradient to its argmax window only
    B, n1, L = cache.fm.pre.shape
    argmax = cache.fm.argmax
    routed = np.where(argmax >= 0, dO, 0.0)
    active = np.take_along_axis(cache.fm.pre, np.maximum(argmax, 0)[..., None], axis=-1)[..., 0] > 0
    routed = routed * active
    dpre = np.zeros((B, n1, L), dtype=cache.fm.pre.dtype)
    b_idx, j_idx = np.nonzero(routed)
    dpre[b_idx, j_idx, argmax[b_idx, j_idx]] = routed[b_idx, j_idx]

    windows = sliding_window_view(cache.V, conv.t, axis=2)          # (B, c, L, t)
    g_kernels = np.tensordot(dpre, windows, axes=([0, 2], [0, 2]))  # (n1, c, t)
    g_biases = dpre.sum(axis=(0, 2))
    grads = {"conv.kernels": g_kernels, "conv.biases": g_biases,
             "dense.weight": g_weight, "dense.bias": g_bias}

    dV = None
    if input_grad:
        dV = np.zeros_like(cache.V)
        for s in range(conv.t):
            dV[:, :, s:s + L] += np.einsum("bjp,jc->bcp", dpre, conv.kernels[:, :, s])
        dV *= cache.mask[:, None, :]
    return grads, dV


class ParameterSet:
    """Named trainable arrays with parallel gradient slots and RMSprop accumulators.

    The arrays are shared with the layers that own them and are only ever
    updated in place.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.accum: dict[str, np.ndarray] = {}
        self.version = 0

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)
        self.accum[name] = np.zeros_like(array)
        return array

    def add_all(self, prefix: str, arrays: Mapping[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            self.add(f"{prefix}.{name}", arr)

    def accumulate(self, prefix: str, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.grads[f"{prefix}.{name}" if prefix else name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self) -> list[str]:
        return list(self.params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def size(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class GradCheckResult:
    max_error: float
    worst: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float | None = None

    @property
    def passed(self) -> bool:
        return self.tolerance is None or self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a|| + ||n||, floor).

    The floor keeps rounding noise on an identically-zero gradient from
    reading as a 100% error.
    """
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(loss_fn: Callable[[], float], param: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros(param.shape)
    flat = param.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn()
        flat[k] = orig - eps
        down = loss_fn()
        flat[k] = orig
        grad.reshape(-1)[k] = (up - down) / (2 * eps)
    return grad


def grad_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
               analytic: Mapping[str, np.ndarray], eps: float = 1e-5,
               tolerance: float | None = None) -> GradCheckResult:
    """Compare analytic gradients against central differences, parameter by parameter.

    ``loss_fn`` must be deterministic and read the arrays in ``params`` (which
    are perturbed in place and restored).
    """
    errors = {}
    for name, param in params.items():
        if param.base is not None and not param.flags.c_contiguous:
            raise ValueError(f"parameter {name} must be contiguous for perturbation")
        numeric = numeric_gradient(loss_fn, param, eps)
        if not np.all(np.isfinite(numeric)) or not np.all(np.isfinite(analytic[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        errors[name] = relative_error(np.asarray(analytic[name], dtype=np.float64), numeric)
    worst = max(errors, key=errors.get) if errors else ""
    return GradCheckResult(errors.get(worst, 0.0), worst, errors, tolerance)
