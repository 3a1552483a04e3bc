"""Slow, obviously-correct reference implementations used only by the tests."""

import numpy as np


def naive_conv(V, kernels, biases, mask=None):
    """Explicit sliding-window convolution + ReLU for one document.

    Returns (values, valid) with values zeroed on windows that touch no real token.
    """
    c, n = V.shape
    n1, _, t = kernels.shape
    L = n - t + 1
    mask = np.ones(n) if mask is None else mask
    values = np.zeros((n1, L))
    valid = np.zeros(L, dtype=bool)
    for p in range(L):
        valid[p] = any(mask[p + s] > 0 for s in range(t))
        for j in range(n1):
            acc = biases[j]
            for a in range(c):
                for s in range(t):
                    acc += kernels[j, a, s] * V[a, p + s]
            values[j, p] = max(acc, 0.0) if valid[p] else 0.0
    return values, valid


def naive_maxpool(values, valid):
    """Max over valid windows, lowest index on ties; (0, -1) when nothing is valid."""
    out = np.zeros(values.shape[0])
    arg = np.full(values.shape[0], -1)
    for j in range(values.shape[0]):
        for p in range(values.shape[1]):
            if valid[p] and (arg[j] < 0 or values[j, p] > out[j]):
                out[j], arg[j] = values[j, p], p
    return out, arg


def pairwise_fm(z, w0, w, V):
    """w0 + w.z + sum over i<j of <v_i, v_j> z_i z_j, summed pair by pair."""
    gram = V @ V.T
    iu, ju = np.triu_indices(len(z), k=1)
    return float(w0 + w @ z + np.sum(gram[iu, ju] * z[iu] * z[ju]))


def mse_by_hand(pred, truth):
    return sum((float(a) - float(b)) ** 2 for a, b in zip(pred, truth)) / len(pred)
