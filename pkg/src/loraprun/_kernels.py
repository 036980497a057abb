"""Kernel dispatch: compiled extension when built, pure Python/numpy otherwise.

Set ``LORAPRUN_PURE_PYTHON=1`` before import to force the fallback.  Both
backends are deterministic; they agree to rounding, not bitwise.
"""
from __future__ import annotations

import os

import numpy as np

from loraprun import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("LORAPRUN_PURE_PYTHON"):
    try:
        from loraprun import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    if BACKEND == "cython" and rows.dtype == out.dtype and out.flags.c_contiguous:
        _impl.scatter_add_rows(out, np.ascontiguousarray(ids, dtype=np.int64), np.ascontiguousarray(rows))
    else:
        _pykernels.scatter_add_rows(out, ids, rows)


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (gelu(x), tanh term kept for the backward pass)."""
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    t = np.empty_like(flat)
    _impl.gelu_forward(flat, out, t)
    return out.reshape(x.shape), t.reshape(x.shape)


def gelu_grad(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = np.empty(x.size, dtype=x.dtype)
    _impl.gelu_backward(np.ascontiguousarray(x).reshape(-1), np.ascontiguousarray(t).reshape(-1),
                        np.ascontiguousarray(g, dtype=x.dtype).reshape(-1), out)
    return out.reshape(x.shape)


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; ``z`` may be overwritten."""
    rows = np.array(z, copy=True, order="C").reshape(-1, z.shape[-1])
    _impl.softmax_rows(rows)
    return rows.reshape(z.shape)


def softmax_grad(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = np.empty(p.shape, dtype=p.dtype)
    _impl.softmax_backward(_rows(p), _rows(g.astype(p.dtype, copy=False)), out.reshape(-1, p.shape[-1]))
    return out


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray | None, eps: float):
    """Returns (out, xhat, inv_std) with xhat/out shaped like x and inv_std one per row."""
    x2 = _rows(x)
    out = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=x.dtype)
    _impl.layer_norm_forward(x2, np.ascontiguousarray(gamma),
                             None if beta is None else np.ascontiguousarray(beta), eps, out, xhat, inv)
    return out.reshape(x.shape), xhat, inv


def layer_norm_grad(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gamma: np.ndarray, want_x: bool):
    g2 = _rows(g.astype(xhat.dtype, copy=False))
    gx = np.empty_like(g2) if want_x else np.empty((0, g2.shape[1]), dtype=g2.dtype)
    ggamma = np.zeros(g2.shape[1], dtype=g2.dtype)
    gbeta = np.zeros(g2.shape[1], dtype=g2.dtype)
    if want_x:
        _impl.layer_norm_backward(g2, xhat, inv, np.ascontiguousarray(gamma), gx, ggamma, gbeta, True)
    else:
        _impl.layer_norm_backward(g2, xhat, inv, np.ascontiguousarray(gamma),
                                  np.empty_like(g2), ggamma, gbeta, False)
    return (gx.reshape(g.shape) if want_x else None), ggamma, gbeta


def lcs_length(a, b) -> int:
    if BACKEND == "cython":
        return int(_impl.lcs_length(a, b))
    return _pykernels.lcs_length(list(a), list(b))
