"""Structured layer pruning with the alternating even-index drop rule."""
from __future__ import annotations

from dataclasses import dataclass

from loraprun.model import TransformerModel


@dataclass(frozen=True)
class PrunePlan:
    n: int
    kept: tuple[int, ...]
    dropped: tuple[int, ...]

    @property
    def dropped_fraction(self) -> float:
        return len(self.dropped) / self.n

    def to_dict(self) -> dict:
        return {"n": self.n, "kept": list(self.kept), "dropped": list(self.dropped)}

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(int(d["n"]), tuple(d["kept"]), tuple(d["dropped"]))


def prune_plan(n: int) -> PrunePlan:
    """Drop every even layer index i with 4 <= i <= n - 2 (1-based); keep the rest."""
    if n < 1:
        raise ValueError(f"layer count must be >= 1, got {n}")
    dropped = tuple(i for i in range(4, n - 1) if i % 2 == 0)
    kept = tuple(i for i in range(1, n + 1) if i not in dropped)
    return PrunePlan(n, kept, dropped)


def apply_prune(model: TransformerModel, plan: PrunePlan) -> TransformerModel:
    """Return a copy holding only the kept layers of both stacks (original weights and indices)."""
    desc = model.descriptor
    if model.enc_indices != list(range(1, plan.n + 1)) or model.dec_indices != list(range(1, plan.n + 1)):
        raise ValueError(f"plan is for {plan.n}+{plan.n} layers, model has "
                         f"{len(model.enc_indices)}+{len(model.dec_indices)} (or is already pruned)")
    drop = {f"{stack}.layers.{i}." for stack in ("encoder", "decoder") for i in plan.dropped}
    clone = model.copy()
    params = {k: t for k, t in clone.params.items() if not any(k.startswith(p) for p in drop)}
    kept = list(plan.kept)
    pruned = TransformerModel(desc.replace(n_enc=len(kept), n_dec=len(kept)), params, kept, kept)
    pruned.prune_plan = plan
    return pruned
