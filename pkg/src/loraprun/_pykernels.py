"""Reference implementations of the hot kernels, used when the compiled module is absent.

Signatures mirror ``_ckernels``: outputs are written into caller-provided arrays.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """out[ids[i]] += rows[i] for every i, in place."""
    np.add.at(out, ids, rows)


def gelu_forward(x: np.ndarray, out: np.ndarray, t: np.ndarray) -> None:
    c = x.dtype.type
    t[...] = np.tanh(c(GELU_K) * x * (c(1.0) + c(GELU_C) * x * x))
    out[...] = c(0.5) * x * (c(1.0) + t)


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    c = x.dtype.type
    d = c(0.5) * (c(1.0) + t) + c(0.5) * x * (c(1.0) - t * t) * c(GELU_K) * (c(1.0) + c(3 * GELU_C) * x * x)
    out[...] = g * d


def softmax_rows(z: np.ndarray) -> None:
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)


def softmax_backward(p: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    out[...] = p * (g - (g * p).sum(axis=1, keepdims=True))


def layer_norm_forward(x, gamma, beta, eps, out, xhat, inv) -> None:
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    iv = 1.0 / np.sqrt(var + eps)
    inv[...] = iv[:, 0]
    xhat[...] = xc * iv
    out[...] = xhat * gamma if beta is None else xhat * gamma + beta


def layer_norm_backward(g, xhat, inv, gamma, gx, ggamma, gbeta, want_x) -> None:
    ggamma += (g * xhat).sum(axis=0)
    gbeta += g.sum(axis=0)
    if want_x:
        gh = g * gamma
        gx[...] = inv[:, None] * (gh - gh.mean(axis=1, keepdims=True)
                                  - xhat * (gh * xhat).mean(axis=1, keepdims=True))


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    """Length of the longest common subsequence of two integer sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            if x == y:
                cur.append(prev[j] + 1)
            else:
                cur.append(cur[j] if cur[j] > prev[j + 1] else prev[j + 1])
        prev = cur
    return prev[-1]
