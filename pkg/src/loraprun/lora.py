"""Low-rank adapters: injection, forward rule, merging and closed-form counting."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from loraprun import numcore as nc
from loraprun.model import ArchDescriptor, Dense, TransformerModel
from loraprun.numcore import Tensor

ADAPTER_INIT_STD = 0.02


class Placement(str, enum.Enum):
    QV = "QV"
    FF = "FF"


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    placement: Placement = Placement.FF

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(str(getattr(self.placement, "value", self.placement)).upper()))
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be a positive finite number, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "placement": self.placement.value}


@dataclass
class LoraAdapter:
    """``down`` is (r, d_in), ``up`` is (d_out, r); ``target`` names the frozen dense layer."""

    target: str
    down: Tensor
    up: Tensor
    scaling: float

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self) -> np.ndarray:
        return self.up.data.dtype.type(self.scaling) * (self.up.data @ self.down.data)


@dataclass
class AdaptedModel:
    """A frozen base model with adapters attached to its target dense layers."""

    model: TransformerModel
    config: LoraConfig
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    @property
    def descriptor(self) -> ArchDescriptor:
        return self.model.descriptor

    def trainable_parameters(self) -> list[Tensor]:
        return [t for a in self.adapters.values() for t in (a.down, a.up)]

    def named_adapter_parameters(self):
        for name, a in self.adapters.items():
            yield f"{name}.lora_down", a.down
            yield f"{name}.lora_up", a.up

    def parameters(self) -> list[Tensor]:
        return self.model.parameters() + self.trainable_parameters()

    def num_trainable(self) -> int:
        return nc.parameters_count(self.trainable_parameters())

    def zero_grad(self) -> None:
        self.model.zero_grad()
        for t in self.trainable_parameters():
            t.grad = None


def target_layers(model: TransformerModel, placement: Placement) -> list[Dense]:
    """Dense layers that receive adapters: Q and V of every attention block
    (cross-attention included) for QV, both FFN projections for FF."""
    placement = Placement(placement)
    out: list[Dense] = []
    for layer in model.encoder + model.decoder:
        if placement is Placement.QV:
            for attn in layer.attentions():
                out += [attn.q, attn.v]
        else:
            out += [layer.ffn.up, layer.ffn.down]
    return out


def inject(model: TransformerModel, config: LoraConfig, seed: int = 0) -> AdaptedModel:
    """Freeze a copy of ``model`` and attach fresh adapters (``up`` starts at zero)."""
    if isinstance(model, AdaptedModel):
        raise TypeError("inject expects a plain model; merge() the adapted one first")
    base = model.copy()
    base.freeze()
    targets = target_layers(base, config.placement)
    for dense in targets:
        d_out, d_in = dense.weight.shape
        if config.rank > min(d_in, d_out):
            raise ValueError(f"rank {config.rank} exceeds dimensions of {dense.name} ({d_out}x{d_in})")
    rng = np.random.default_rng(seed)
    dtype = base.embed.data.dtype
    adapted = AdaptedModel(base, config)
    for dense in targets:
        d_out, d_in = dense.weight.shape
        down = Tensor(rng.normal(0.0, ADAPTER_INIT_STD, (config.rank, d_in)).astype(dtype),
                      requires_grad=True, name=f"{dense.name}.lora_down", dtype=dtype)
        up = Tensor(np.zeros((d_out, config.rank), dtype=dtype), requires_grad=True,
                    name=f"{dense.name}.lora_up", dtype=dtype)
        adapter = LoraAdapter(dense.name, down, up, config.scaling)
        dense.adapter = adapter
        adapted.adapters[dense.name] = adapter
    return adapted


def lora_forward(w0, adapter: LoraAdapter | tuple, alpha: float, rank: int, x) -> np.ndarray:
    """``W0 x + (alpha / r) W_up W_down x`` for a vector or a batch of row vectors."""
    if isinstance(adapter, LoraAdapter):
        down, up = adapter.down, adapter.up
    else:
        down, up = adapter
    as_t = lambda a: a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=nc.default_dtype()))
    x = as_t(x)
    vector = x.ndim == 1
    if vector:
        x = nc.reshape(x, (1, x.shape[0]))
    y = nc.lora_linear(x, as_t(w0), None, as_t(down), as_t(up), alpha / rank)
    return y.data[0] if vector else y.data


def merge(adapted: AdaptedModel) -> TransformerModel:
    """Fold every adapter into its base weight: ``W0 + (alpha / r) W_up W_down``."""
    merged = adapted.model.copy()
    for name, adapter in adapted.adapters.items():
        w = merged.params[f"{name}.weight"]
        w.data = w.data + adapter.delta().astype(w.data.dtype)
    for dense in merged.dense_layers():
        dense.adapter = None
    merged.unfreeze()
    return merged


def count_lora_params(descriptor: ArchDescriptor, config: LoraConfig) -> int:
    """Closed form: r * (d_in + d_out) summed over every target implied by the placement."""
    d, f, r = descriptor.d_model, descriptor.d_ffn, config.rank
    if Placement(config.placement) is Placement.QV:
        blocks = descriptor.n_enc + 2 * descriptor.n_dec
        return blocks * 2 * r * (d + d)
    ffns = descriptor.n_enc + descriptor.n_dec
    return ffns * (r * (d + f) + r * (f + d))
