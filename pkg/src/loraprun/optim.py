"""AdamW with decoupled weight decay, linear warmup and gradient accumulation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from loraprun.numcore import NonFiniteError, Tensor, backward, scale


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 1000
    accumulation: int = 1

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and lr must be positive")
        if self.warmup_steps < 0 or self.accumulation < 1:
            raise ValueError("warmup_steps must be >= 0 and accumulation >= 1")


@dataclass
class OptimState:
    step: int = 0
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)

    def moments_for(self, params: Sequence[Tensor]) -> dict[str, dict[str, np.ndarray]]:
        """Moments keyed by parameter name, for checkpointing."""
        out = {}
        for i, p in enumerate(params):
            if i in self.exp_avg:
                out[p.name or str(i)] = {"m": self.exp_avg[i], "v": self.exp_avg_sq[i]}
        return out


def lr_at(step: int, config: AdamWConfig) -> float:
    """Linear ramp to ``config.lr`` over ``warmup_steps``, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.warmup_steps == 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup_steps)


def adamw_step(state: OptimState, params: Sequence[Tensor], config: AdamWConfig,
               lr: float | None = None) -> OptimState:
    """One AdamW update of every trainable tensor in ``params`` from its ``.grad``.

    Moments are keyed by position in ``params``, so pass the same ordered list
    every step.  Frozen tensors are skipped entirely.
    """
    trainable = [(i, p) for i, p in enumerate(params) if p.requires_grad]
    for i, p in trainable:
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {p.name or i}")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {p.name or i} at step {state.step + 1}")
    state.step += 1
    t = state.step
    lr = lr_at(t, config) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    step_size = lr / bc1
    sqrt_bc2 = math.sqrt(bc2)
    for i, p in trainable:
        g = p.grad
        m = state.exp_avg.get(i)
        if m is None:
            m = state.exp_avg[i] = np.zeros_like(p.data)
            state.exp_avg_sq[i] = np.zeros_like(p.data)
        v = state.exp_avg_sq[i]
        dt = p.data.dtype.type
        if config.weight_decay:
            p.data *= dt(1.0 - lr * config.weight_decay)
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v) / dt(sqrt_bc2)
        denom += dt(config.eps)
        p.data -= dt(step_size) * (m / denom)
    return state


def accumulate_and_step(params: Sequence[Tensor], batches: Sequence, loss_fn: Callable[..., Tensor],
                        state: OptimState, config: AdamWConfig) -> tuple[OptimState, float]:
    """Average the loss gradients of ``config.accumulation`` micro-batches, then take one step.

    ``loss_fn(batch)`` must return a scalar mean loss; each micro-batch is
    weighted equally.  Returns the updated state and the mean loss.
    """
    if len(batches) != config.accumulation:
        raise ValueError(f"expected {config.accumulation} micro-batches, got {len(batches)}")
    for p in params:
        p.grad = None
    total = 0.0
    for batch in batches:
        if _is_empty(batch):
            raise ValueError("empty micro-batch")
        loss = loss_fn(batch)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss at step {state.step + 1}")
        total += float(loss.data)
        if len(batches) > 1:
            loss = scale(loss, 1.0 / len(batches))
        backward(loss)
    adamw_step(state, params, config)
    return state, total / len(batches)


def _is_empty(batch) -> bool:
    if batch is None:
        return True
    if isinstance(batch, (tuple, list)):
        return len(batch) == 0 or any(np.size(b) == 0 for b in batch)
    return np.size(batch) == 0
