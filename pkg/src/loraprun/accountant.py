"""Closed-form parameter, multi-task storage and training-memory accounting."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from loraprun.lora import LoraConfig, count_lora_params
from loraprun.model import ArchDescriptor
from loraprun.prune import prune_plan


class Regime(str, enum.Enum):
    FULL = "full"
    PRUNE = "prune"
    LORA = "lora"
    LORA_PRUNE = "lora+prune"

    @property
    def pruned(self) -> bool:
        return self in (Regime.PRUNE, Regime.LORA_PRUNE)

    @property
    def uses_lora(self) -> bool:
        return self in (Regime.LORA, Regime.LORA_PRUNE)


def _layer_params(desc: ArchDescriptor, cross: bool) -> int:
    d, f = desc.d_model, desc.d_ffn
    b = 1 if desc.biases else 0
    attn = 4 * (d * d + b * d)
    norm = d + b * d
    ffn = f * d + b * f + d * f + b * d
    blocks = 2 if cross else 1
    return blocks * (attn + norm) + ffn + norm


def count_params(desc: ArchDescriptor) -> int:
    """Embeddings, per-stack positions and embedding norm, every layer, and an untied head if any."""
    desc.validate(allow_empty=True)
    d = desc.d_model
    norm = d + (d if desc.biases else 0)
    total = desc.vocab_size * d
    total += 2 * (desc.max_positions * d + norm)
    total += desc.n_enc * _layer_params(desc, cross=False)
    total += desc.n_dec * _layer_params(desc, cross=True)
    if not desc.tie_embeddings:
        total += desc.vocab_size * d
    return total


def pruned_descriptor(desc: ArchDescriptor) -> ArchDescriptor:
    return desc.replace(n_enc=len(prune_plan(desc.n_enc).kept) if desc.n_enc else 0,
                        n_dec=len(prune_plan(desc.n_dec).kept) if desc.n_dec else 0)


@dataclass(frozen=True)
class FootprintReport:
    regime: Regime
    n_tasks: int
    P_m: int
    P_prun: int
    P_trainable: int
    P_total: int
    storage_for_N_tasks: int
    est_training_bytes: int

    def as_row(self) -> dict:
        return {"regime": self.regime.value, "trained_params": self.P_trainable,
                "total_params": self.P_total, "storage_params": self.storage_for_N_tasks,
                "est_training_bytes": self.est_training_bytes}


def footprint(desc: ArchDescriptor, regime: Regime | str, lora_cfg: LoraConfig | None = None,
              n_tasks: int = 1) -> FootprintReport:
    """Storage for N tasks and the 32-bit weight + gradient + two-moment training footprint."""
    regime = Regime(regime)
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    lora_cfg = lora_cfg or LoraConfig()
    p_m = count_params(desc)
    pdesc = pruned_descriptor(desc)
    p_prun = count_params(pdesc)
    base_desc, base = (pdesc, p_prun) if regime.pruned else (desc, p_m)
    if regime.uses_lora:
        trainable = count_lora_params(base_desc, lora_cfg)
        total = base + trainable
        storage = n_tasks * trainable + base
    else:
        trainable = total = base
        storage = n_tasks * base
    est = 4 * total + 4 * trainable + 8 * trainable
    return FootprintReport(regime, n_tasks, p_m, p_prun, trainable, total, storage, est)
