"""LOPR1 checkpoint container: magic line, JSON metadata block, little-endian float32 tensors."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from loraprun.lora import AdaptedModel, LoraAdapter, LoraConfig
from loraprun.model import ArchDescriptor, TransformerModel
from loraprun.numcore import Tensor
from loraprun.optim import OptimState
from loraprun.prune import PrunePlan

MAGIC = b"LOPR1\n"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "model")


def _le32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=_LE_F32)


def content_hash(model: TransformerModel) -> str:
    """SHA-256 over parameter names, shapes and float32 little-endian bytes."""
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(f"{name}:{t.data.shape}\n".encode())
        h.update(_le32(t.data).tobytes())
    return h.hexdigest()


def write(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    arrays = [(k, _le32(v)) for k, v in tensors.items()]
    digest = hashlib.sha256()
    for _, a in arrays:
        digest.update(a.tobytes())
    meta = dict(meta, format=FORMAT_VERSION,
                tensors=[{"name": k, "shape": list(a.shape)} for k, a in arrays],
                payload_sha256=digest.hexdigest())
    block = json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(block)}\n".encode())
        fh.write(block)
        for _, a in arrays:
            fh.write(a.tobytes())
    os.replace(tmp, path)


def read(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a LOPR1 checkpoint")
    pos = len(MAGIC)
    try:
        nl = raw.index(b"\n", pos)
        size = int(raw[pos:nl])
        meta = json.loads(raw[nl + 1:nl + 1 + size].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata block ({exc})") from None
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format')}")
    pos = nl + 1 + size
    tensors = {}
    digest = hashlib.sha256()
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        digest.update(chunk)
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=_LE_F32).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw) or digest.hexdigest() != meta["payload_sha256"]:
        raise CheckpointError(f"{path}: payload is corrupt")
    return Checkpoint(meta, tensors)


def _model_meta(model: TransformerModel) -> dict:
    return {
        "descriptor": model.descriptor.to_dict(),
        "enc_indices": model.enc_indices,
        "dec_indices": model.dec_indices,
        "prune": model.prune_plan.to_dict() if model.prune_plan else None,
    }


def _optim_tensors(state: OptimState | None, params: Sequence[Tensor]) -> tuple[dict, dict]:
    if state is None:
        return {}, {}
    names = [p.name for p in params]
    tensors = {}
    for i, name in enumerate(names):
        if i in state.exp_avg:
            tensors[f"optim.m.{name}"] = state.exp_avg[i]
            tensors[f"optim.v.{name}"] = state.exp_avg_sq[i]
    return {"optim": {"step": state.step, "order": names}}, tensors


def save(path: str | Path, model: TransformerModel | AdaptedModel, *, adapters_only: bool = False,
         optim_state: OptimState | None = None, optim_params: Sequence[Tensor] = (),
         step: int = 0, extra: dict | None = None) -> None:
    """Full model (plus adapters if any), or adapters only with the base model's content hash."""
    adapted = isinstance(model, AdaptedModel)
    base = model.model if adapted else model
    if adapters_only and not adapted:
        raise ValueError("adapters_only requires an adapted model")
    meta = {"kind": "adapters" if adapters_only else "model", "step": step, **_model_meta(base),
            "lora": model.config.to_dict() if adapted else None, "extra": extra or {}}
    tensors: dict[str, np.ndarray] = {}
    if adapters_only:
        meta["base_hash"] = content_hash(base)
    else:
        tensors.update((k, t.data) for k, t in base.named_parameters())
    if adapted:
        tensors.update((k, t.data) for k, t in model.named_adapter_parameters())
    optim_meta, optim_arrays = _optim_tensors(optim_state, optim_params)
    meta.update(optim_meta)
    tensors.update(optim_arrays)
    write(path, meta, tensors)


def _attach(ckpt: Checkpoint, base: TransformerModel) -> AdaptedModel:
    from loraprun.lora import target_layers

    cfg = LoraConfig(**ckpt.meta["lora"])
    base.freeze()
    adapted = AdaptedModel(base, cfg)
    for dense in target_layers(base, cfg.placement):
        down = Tensor(ckpt.tensors[f"{dense.name}.lora_down"], requires_grad=True,
                      name=f"{dense.name}.lora_down", dtype=np.float32)
        up = Tensor(ckpt.tensors[f"{dense.name}.lora_up"], requires_grad=True,
                    name=f"{dense.name}.lora_up", dtype=np.float32)
        adapter = LoraAdapter(dense.name, down, up, cfg.scaling)
        dense.adapter = adapter
        adapted.adapters[dense.name] = adapter
    return adapted


def restore(ckpt: Checkpoint | str | Path, base: TransformerModel | None = None
            ) -> TransformerModel | AdaptedModel:
    """Rebuild the stored model; adapter-only checkpoints need the matching ``base``."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = read(ckpt)
    meta = ckpt.meta
    if ckpt.kind == "adapters":
        if base is None:
            raise ValueError("adapter-only checkpoint needs its base model")
        if content_hash(base) != meta["base_hash"]:
            raise CheckpointError("base model does not match the adapter checkpoint's base hash")
        return _attach(ckpt, base.copy())
    desc = ArchDescriptor(**meta["descriptor"])
    params = {k: Tensor(v, requires_grad=True, name=k, dtype=np.float32) for k, v in ckpt.tensors.items()
              if not k.startswith("optim.") and ".lora_" not in k}
    model = TransformerModel(desc, params, meta["enc_indices"], meta["dec_indices"])
    if meta.get("prune"):
        model.prune_plan = PrunePlan.from_dict(meta["prune"])
    return _attach(ckpt, model) if meta.get("lora") else model


def restore_optim(ckpt: Checkpoint, params: Sequence[Tensor]) -> OptimState:
    """Optimizer moments keyed to the positions of ``params`` (matched by name)."""
    info = ckpt.meta.get("optim")
    if info is None:
        raise ValueError("checkpoint holds no optimizer state")
    state = OptimState(step=int(info["step"]))
    for i, p in enumerate(params):
        key = f"optim.m.{p.name}"
        if key in ckpt.tensors:
            state.exp_avg[i] = ckpt.tensors[key].astype(p.data.dtype)
            state.exp_avg_sq[i] = ckpt.tensors[f"optim.v.{p.name}"].astype(p.data.dtype)
    return state
