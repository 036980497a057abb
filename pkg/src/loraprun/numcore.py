"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive builds its output eagerly and, when any input needs a
gradient, records a closure that maps the upstream gradient to one
gradient per input.  ``backward`` replays those closures in reverse
topological order.  Broadcasting is deliberately narrow: apart from a
1-D bias added over the leading dimensions, operand shapes must match
exactly.  Constant masks (plain arrays) may broadcast freely.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from loraprun import _kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's rule."""


class NonFiniteError(FloatingPointError):
    """Raised when a node produces NaN or Inf."""


class _State:
    dtype = np.float32
    grad_enabled = True
    check_finite = False
    tape: list | None = None


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. float64 for checks)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def detect_anomalies(enabled: bool = True) -> Iterator[None]:
    """Check every node output for NaN/Inf while active."""
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _state.check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"node {op!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        if _state.tape is not None:
            _state.tape.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    _check(b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0], "add",
           f"shapes {a.shape} and {b.shape} do not match")
    n = b.shape[0]
    return _result(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "bias_add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", f"shapes {a.shape} and {b.shape} do not match")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "mul", f"shapes {a.shape} and {b.shape} do not match")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    out, t = _kernels.gelu(x.data)
    return _result(out, (x,), lambda g: (_kernels.gelu_grad(x.data, t, g),), "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(x.data.dtype),), "mean")


# ---------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {orig} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions must agree exactly."""
    _check(a.ndim == b.ndim and a.ndim >= 2, "matmul", f"rank mismatch {a.shape} @ {b.shape}")
    _check(a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2], "matmul",
           f"shapes {a.shape} @ {b.shape} do not conform")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for weight of shape (d_out, d_in)."""
    _check(weight.ndim == 2 and x.shape[-1] == weight.shape[1], "linear",
           f"input {x.shape} incompatible with weight {weight.shape}")
    d_in = weight.shape[1]
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        _check(bias.shape == (weight.shape[0],), "linear", f"bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _result(out.reshape(lead + (weight.shape[0],)), parents, bw, "linear")


def lora_linear(x: Tensor, weight: Tensor, bias: Tensor | None, down: Tensor, up: Tensor,
                scaling: float) -> Tensor:
    """Dense layer with a parallel low-rank branch.

    ``y = x W0^T + b + scaling * (x down^T) up^T`` with down (r, d_in), up (d_out, r).
    The base product is evaluated exactly as in :func:`linear`, so a zero
    ``up`` reproduces the plain layer bit for bit.
    """
    _check(weight.ndim == 2 and x.shape[-1] == weight.shape[1], "lora_linear",
           f"input {x.shape} incompatible with weight {weight.shape}")
    d_out, d_in = weight.shape
    _check(down.ndim == 2 and down.shape[1] == d_in and up.ndim == 2 and up.shape[0] == d_out
           and up.shape[1] == down.shape[0], "lora_linear",
           f"adapter shapes down {down.shape} / up {up.shape} do not fit weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    base = x2 @ weight.data.T
    if bias is not None:
        base = base + bias.data
    s = x2.dtype.type(scaling)
    h = x2 @ down.data.T
    branch = h @ up.data.T
    branch *= s
    out = base + branch
    parents = (x, weight, down, up) if bias is None else (x, weight, down, up, bias)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gu = s * (g2 @ up.data)  # gradient reaching h
        gx = None
        if x.requires_grad:
            gx = g2 @ weight.data
            gx += gu @ down.data
            gx = gx.reshape(x.shape)
        gw = g2.T @ x2 if weight.requires_grad else None
        gdown = gu.T @ x2 if down.requires_grad else None
        gup = s * (g2.T @ h) if up.requires_grad else None
        grads = (gx, gw, gdown, gup)
        if bias is not None:
            grads += (g2.sum(axis=0) if bias.requires_grad else None,)
        return grads

    return _result(out.reshape(lead + (d_out,)), parents, bw, "lora_linear")


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is an additive constant (e.g. -1e9 at blocked slots)."""
    z = x.data if mask is None else x.data + mask
    if z.shape != x.shape:
        raise ShapeError(f"softmax: mask {np.shape(mask)} broadcasts input {x.shape} to {z.shape}")
    p = _kernels.softmax(z)
    return _result(p, (x,), lambda g: (_kernels.softmax_grad(p, g),), "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; ``eps`` sits inside the square root."""
    d = x.shape[-1]
    _check(gamma.shape == (d,) and (beta is None or beta.shape == (d,)), "layer_norm",
           f"affine shape {gamma.shape} does not match features {d}")
    out, xhat, inv = _kernels.layer_norm(x.data, gamma.data, None if beta is None else beta.data, eps)
    parents = (x, gamma) if beta is None else (x, gamma, beta)

    def bw(g):
        gx, gg, gb = _kernels.layer_norm_grad(g, xhat, inv, gamma.data, x.requires_grad)
        if beta is None:
            return gx, gg
        return gx, gg, gb

    return _result(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------- lookup and loss


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"embedding: ids outside [0, {vocab})")

    def bw(g):
        out = np.zeros_like(table.data)
        _kernels.scatter_add_rows(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean token cross-entropy over positions whose target differs from ``ignore_index``."""
    targets = np.asarray(targets)
    _check(logits.shape[:-1] == targets.shape, "cross_entropy",
           f"logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is ignored")
    if (t[keep] < 0).any() or (t[keep] >= v).any():
        raise ShapeError(f"cross_entropy: target ids outside [0, {v})")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def bw(g):
        p = np.exp(logp)
        p[rows, t[rows]] -= 1.0
        p *= keep[:, None]
        return ((p * (g / count)).reshape(logits.shape).astype(logits.data.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, nodes: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    ``nodes`` may supply a recorded topological order (see :class:`Graph`);
    otherwise one is derived from ``loss``.  Each node is visited once.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss) if nodes is None else list(nodes)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {id(loss): loss} if loss.is_leaf else {}
    for node in reversed(order):
        if node.is_leaf:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if p.is_leaf:
                leaves[k] = p
            grads[k] = grads[k] + pg if k in grads else pg
    for k, leaf in leaves.items():
        g = grads[k]
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------- graphs


class Graph:
    """A traced computation over named inputs.

    ``fn`` receives the inputs as keyword tensors and returns a tensor or a
    mapping of named tensors.  :meth:`evaluate` records the executed nodes in
    topological order with anomaly checks on; :meth:`backward` replays them.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]]):
        self.fn = fn
        self.nodes: list[Tensor] = []
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] = {}

    def evaluate(self, inputs: Mapping[str, Tensor | np.ndarray]) -> dict[str, Tensor]:
        self.inputs = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
                       for k, v in inputs.items()}
        tape: list[Tensor] = []
        prev = _state.tape
        _state.tape = tape
        try:
            with detect_anomalies():
                out = self.fn(**self.inputs)
        finally:
            _state.tape = prev
        self.nodes = tape
        self.outputs = dict(out) if isinstance(out, Mapping) else {"out": out}
        return self.outputs

    def backward(self, loss: str = "out") -> dict[str, np.ndarray | None]:
        if not self.nodes and not self.outputs:
            raise RuntimeError("backward called before evaluate")
        for t in self.inputs.values():
            t.grad = None
        node = self.outputs[loss]
        if node.data.size != 1:
            raise ShapeError(f"backward: output {loss!r} is not scalar (shape {node.shape})")
        upto = self.nodes[: self.nodes.index(node) + 1] if node in self.nodes else [node]
        backward(node, upto)
        return {k: t.grad for k, t in self.inputs.items()}


def evaluate(graph: Graph, inputs: Mapping[str, Tensor | np.ndarray]) -> dict[str, Tensor]:
    return graph.evaluate(inputs)


# ---------------------------------------------------------------- gradient checking


def finite_diff_check(fn: Callable[..., Tensor], point: Mapping[str, Tensor | np.ndarray],
                      epsilon: float = 1e-5, wrt: Iterable[str] | None = None,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative disagreement between backprop and central differences.

    Tensors in ``point`` are perturbed in place, so ``fn`` may close over them
    (e.g. a model's own parameters) instead of reading its keyword arguments.
    Runs in float64.  ``max_coords`` optionally subsamples coordinates per input.
    """
    with precision(np.float64):
        tensors = {}
        for k, v in point.items():
            if isinstance(v, Tensor):
                if v.data.dtype != np.float64:
                    raise TypeError(f"finite_diff_check: tensor {k!r} must be float64")
                tensors[k] = v
            else:
                tensors[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True)
        names = list(tensors) if wrt is None else list(wrt)
        for t in tensors.values():
            t.grad = None
        loss = fn(**tensors)
        if loss.data.size != 1:
            raise ShapeError("finite_diff_check: function must be scalar-valued")
        backward(loss)

        def value() -> float:
            with no_grad():
                return float(fn(**tensors).data)

        base = value()
        if value() != base or float(loss.data) != base:
            raise RuntimeError("finite_diff_check: function is not deterministic")
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in names:
            t = tensors[k]
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = value()
                flat[i] = orig - epsilon
                fm = value()
                flat[i] = orig
                numeric = (fp - fm) / (2 * epsilon)
                a = float(a_flat[i])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                worst = max(worst, err)
        return worst


def parameters_count(tensors: Iterable[Tensor]) -> int:
    return int(sum(t.data.size for t in tensors))


__all__ = [
    "Tensor", "Graph", "ShapeError", "NonFiniteError", "add", "sub", "mul", "scale", "gelu", "relu",
    "tanh", "sum_", "mean", "reshape", "transpose", "concat", "matmul", "linear", "lora_linear",
    "softmax", "layer_norm", "embedding", "cross_entropy", "backward", "evaluate",
    "finite_diff_check", "precision", "no_grad", "detect_anomalies", "default_dtype",
]
