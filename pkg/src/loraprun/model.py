"""Encoder-decoder Transformer on top of :mod:`loraprun.numcore`.

Post-norm layers (residual, then layer norm), learned absolute positions,
GELU feed-forward blocks and an output projection tied to the token
embedding.  Layers remember their original 1-based index so a pruned model
can still be mapped back onto its parent.
"""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from loraprun import numcore as nc
from loraprun.numcore import Tensor

PAD_ID = 0
NEG_INF = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ArchDescriptor:
    n_enc: int
    n_dec: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab_size: int
    max_positions: int = 1026
    tie_embeddings: bool = True
    biases: bool = True

    def validate(self, allow_empty: bool = False) -> None:
        low = 0 if allow_empty else 1
        if self.n_enc < low or self.n_dec < low:
            raise ValueError(f"layer counts must be >= {low}: {self.n_enc}+{self.n_dec}")
        for field in ("d_model", "d_ffn", "n_heads", "vocab_size", "max_positions"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ArchDescriptor":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def bart_large() -> ArchDescriptor:
    return ArchDescriptor(n_enc=12, n_dec=12, d_model=1024, d_ffn=4096, n_heads=16,
                          vocab_size=50265, max_positions=1026, tie_embeddings=True, biases=True)


def t5_large() -> ArchDescriptor:
    # learned absolute positions stand in for T5's relative bias
    return ArchDescriptor(n_enc=24, n_dec=24, d_model=1024, d_ffn=4096, n_heads=16,
                          vocab_size=32128, max_positions=512, tie_embeddings=True, biases=False)


# ---------------------------------------------------------------- parameter layout


def _dense_shapes(prefix: str, d_out: int, d_in: int, biases: bool):
    yield f"{prefix}.weight", (d_out, d_in)
    if biases:
        yield f"{prefix}.bias", (d_out,)


def _norm_shapes(prefix: str, d: int, biases: bool):
    yield f"{prefix}.gamma", (d,)
    if biases:
        yield f"{prefix}.beta", (d,)


def _attn_shapes(prefix: str, d: int, biases: bool):
    for proj in ("q", "k", "v", "o"):
        yield from _dense_shapes(f"{prefix}.{proj}", d, d, biases)


def _ffn_shapes(prefix: str, d: int, f: int, biases: bool):
    yield from _dense_shapes(f"{prefix}.up", f, d, biases)
    yield from _dense_shapes(f"{prefix}.down", d, f, biases)


def layer_shapes(desc: ArchDescriptor, stack: str, index: int) -> list[tuple[str, tuple]]:
    d, f, b = desc.d_model, desc.d_ffn, desc.biases
    p = f"{stack}.layers.{index}"
    out = list(_attn_shapes(f"{p}.self_attn", d, b))
    out += _norm_shapes(f"{p}.ln_self", d, b)
    if stack == "decoder":
        out += _attn_shapes(f"{p}.cross_attn", d, b)
        out += _norm_shapes(f"{p}.ln_cross", d, b)
    out += _ffn_shapes(f"{p}.ffn", d, f, b)
    out += _norm_shapes(f"{p}.ln_ffn", d, b)
    return out


def parameter_shapes(desc: ArchDescriptor, enc_indices=None, dec_indices=None) -> list[tuple[str, tuple]]:
    """Every parameter name and shape in enumeration order, without allocating."""
    d, b = desc.d_model, desc.biases
    enc_indices = range(1, desc.n_enc + 1) if enc_indices is None else enc_indices
    dec_indices = range(1, desc.n_dec + 1) if dec_indices is None else dec_indices
    out = [("embed.tokens", (desc.vocab_size, d))]
    for stack, indices in (("encoder", enc_indices), ("decoder", dec_indices)):
        out.append((f"{stack}.positions", (desc.max_positions, d)))
        out += _norm_shapes(f"{stack}.ln_embed", d, b)
        for i in indices:
            out += layer_shapes(desc, stack, i)
    if not desc.tie_embeddings:
        out.append(("lm_head.weight", (desc.vocab_size, d)))
    return out


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _init_value(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("bias", "beta"):
        return np.zeros(shape, dtype=dtype)
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    return _truncated_normal(rng, shape, INIT_STD).astype(dtype)


# ---------------------------------------------------------------- modules


class Dense:
    """``y = x W^T + b``; routes through the low-rank path once an adapter is attached."""

    def __init__(self, name: str, weight: Tensor, bias: Tensor | None):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.adapter = None

    def __call__(self, x: Tensor) -> Tensor:
        a = self.adapter
        if a is None:
            return nc.linear(x, self.weight, self.bias)
        return nc.lora_linear(x, self.weight, self.bias, a.down, a.up, a.scaling)


class LayerNorm:
    def __init__(self, gamma: Tensor, beta: Tensor | None):
        self.gamma = gamma
        self.beta = beta

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gamma, self.beta)


class Attention:
    def __init__(self, q: Dense, k: Dense, v: Dense, o: Dense, n_heads: int):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.n_heads = n_heads

    def denses(self) -> tuple[Dense, ...]:
        return self.q, self.k, self.v, self.o

    def _split(self, t: Tensor) -> Tensor:
        b, n, d = t.shape
        return nc.transpose(nc.reshape(t, (b, n, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def project_kv(self, source: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(source)), self._split(self.v(source))

    def __call__(self, x: Tensor, source: Tensor | None = None, mask: np.ndarray | None = None,
                 past: tuple[Tensor, Tensor] | None = None,
                 static_kv: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        b, t, d = x.shape
        dh = d // self.n_heads
        q = nc.scale(self._split(self.q(x)), 1.0 / math.sqrt(dh))
        if static_kv is not None:
            k, v = static_kv
        else:
            k, v = self.project_kv(x if source is None else source)
            if past is not None:
                k = nc.concat([past[0], k], axis=2)
                v = nc.concat([past[1], v], axis=2)
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2)))
        p = nc.softmax(scores, mask)
        ctx = nc.matmul(p, v)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.o(ctx), (k, v)


class FeedForward:
    def __init__(self, up: Dense, down: Dense):
        self.up, self.down = up, down

    def denses(self) -> tuple[Dense, ...]:
        return self.up, self.down

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(nc.gelu(self.up(x)))


class EncoderLayer:
    def __init__(self, index: int, self_attn: Attention, ln_self: LayerNorm, ffn: FeedForward,
                 ln_ffn: LayerNorm):
        self.index = index
        self.self_attn, self.ln_self = self_attn, ln_self
        self.ffn, self.ln_ffn = ffn, ln_ffn

    def attentions(self) -> tuple[Attention, ...]:
        return (self.self_attn,)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        a, _ = self.self_attn(x, mask=mask)
        x = self.ln_self(x + a)
        return self.ln_ffn(x + self.ffn(x))


class DecoderLayer:
    def __init__(self, index: int, self_attn: Attention, ln_self: LayerNorm, cross_attn: Attention,
                 ln_cross: LayerNorm, ffn: FeedForward, ln_ffn: LayerNorm):
        self.index = index
        self.self_attn, self.ln_self = self_attn, ln_self
        self.cross_attn, self.ln_cross = cross_attn, ln_cross
        self.ffn, self.ln_ffn = ffn, ln_ffn

    def attentions(self) -> tuple[Attention, ...]:
        return self.self_attn, self.cross_attn

    def __call__(self, y: Tensor, memory: Tensor, self_mask, cross_mask, past=None, cross_kv=None):
        a, kv = self.self_attn(y, mask=self_mask, past=past)
        y = self.ln_self(y + a)
        c, _ = self.cross_attn(y, source=memory, mask=cross_mask, static_kv=cross_kv)
        y = self.ln_cross(y + c)
        return self.ln_ffn(y + self.ffn(y)), kv


class TransformerModel:
    """Parameters live in one ordered name -> Tensor mapping; modules hold references into it."""

    def __init__(self, descriptor: ArchDescriptor, params: dict[str, Tensor],
                 enc_indices: list[int], dec_indices: list[int]):
        self.descriptor = descriptor
        self.params = params
        self.enc_indices = list(enc_indices)
        self.dec_indices = list(dec_indices)
        self.prune_plan = None
        self._assemble()

    def _dense(self, prefix: str) -> Dense:
        return Dense(prefix, self.params[f"{prefix}.weight"], self.params.get(f"{prefix}.bias"))

    def _norm(self, prefix: str) -> LayerNorm:
        return LayerNorm(self.params[f"{prefix}.gamma"], self.params.get(f"{prefix}.beta"))

    def _attn(self, prefix: str) -> Attention:
        return Attention(*(self._dense(f"{prefix}.{p}") for p in "qkvo"), self.descriptor.n_heads)

    def _ffn(self, prefix: str) -> FeedForward:
        return FeedForward(self._dense(f"{prefix}.up"), self._dense(f"{prefix}.down"))

    def _assemble(self) -> None:
        p = self.params
        self.embed = p["embed.tokens"]
        self.enc_positions = p["encoder.positions"]
        self.dec_positions = p["decoder.positions"]
        self.enc_ln_embed = self._norm("encoder.ln_embed")
        self.dec_ln_embed = self._norm("decoder.ln_embed")
        self.lm_head = p.get("lm_head.weight", self.embed)
        self.encoder = []
        for i in self.enc_indices:
            pre = f"encoder.layers.{i}"
            self.encoder.append(EncoderLayer(i, self._attn(f"{pre}.self_attn"), self._norm(f"{pre}.ln_self"),
                                             self._ffn(f"{pre}.ffn"), self._norm(f"{pre}.ln_ffn")))
        self.decoder = []
        for i in self.dec_indices:
            pre = f"decoder.layers.{i}"
            self.decoder.append(DecoderLayer(
                i, self._attn(f"{pre}.self_attn"), self._norm(f"{pre}.ln_self"),
                self._attn(f"{pre}.cross_attn"), self._norm(f"{pre}.ln_cross"),
                self._ffn(f"{pre}.ffn"), self._norm(f"{pre}.ln_ffn")))

    # -- enumeration

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return nc.parameters_count(self.params.values())

    def layer_parameter_counts(self) -> dict[str, int]:
        """Parameter count per layer (``encoder.3`` ...) plus ``embeddings`` for everything else."""
        counts: dict[str, int] = {}
        for name, t in self.params.items():
            parts = name.split(".")
            key = f"{parts[0]}.{parts[2]}" if len(parts) > 2 and parts[1] == "layers" else "embeddings"
            counts[key] = counts.get(key, 0) + t.data.size
        return counts

    def dense_layers(self) -> Iterator[Dense]:
        for layer in self.encoder + self.decoder:
            for attn in layer.attentions():
                yield from attn.denses()
            yield from layer.ffn.denses()

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def unfreeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = True

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=t.data.dtype)

    def astype(self, dtype) -> "TransformerModel":
        clone = self.copy()
        for t in clone.params.values():
            t.data = t.data.astype(dtype)
        return clone

    def copy(self) -> "TransformerModel":
        params = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k, dtype=t.data.dtype)
                  for k, t in self.params.items()}
        clone = TransformerModel(self.descriptor, params, self.enc_indices, self.dec_indices)
        clone.prune_plan = copy.deepcopy(self.prune_plan)
        return clone


def build_model(descriptor: ArchDescriptor, seed: int = 0, dtype=None) -> TransformerModel:
    descriptor.validate()
    dtype = dtype or nc.default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(descriptor):
        params[name] = Tensor(_init_value(name, shape, rng, dtype), requires_grad=True, name=name, dtype=dtype)
    return TransformerModel(descriptor, params, list(range(1, descriptor.n_enc + 1)),
                            list(range(1, descriptor.n_dec + 1)))


# ---------------------------------------------------------------- forward


def _unwrap(model) -> TransformerModel:
    return getattr(model, "model", model)


def _check_tokens(desc: ArchDescriptor, tokens: np.ndarray, what: str) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"{what} must be a (batch, length) id matrix, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= desc.vocab_size):
        raise ValueError(f"{what} contains ids outside [0, {desc.vocab_size})")
    if tokens.shape[1] > desc.max_positions:
        raise ValueError(f"{what} length {tokens.shape[1]} exceeds max_positions={desc.max_positions}")
    return tokens


def padding_mask(tokens: np.ndarray, pad_id: int = PAD_ID, dtype=np.float32) -> np.ndarray:
    """Additive (batch, 1, 1, len) mask blocking padded key positions."""
    return np.where(tokens == pad_id, NEG_INF, 0.0).astype(dtype)[:, None, None, :]


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF, dtype=dtype), k=1)[None, None]


def _embed(model: TransformerModel, tokens: np.ndarray, positions: Tensor, norm: LayerNorm,
           offset: int = 0) -> Tensor:
    n = tokens.shape[1]
    pos = nc.embedding(positions, np.broadcast_to(np.arange(offset, offset + n), tokens.shape))
    return norm(nc.embedding(model.embed, tokens) + pos)


def encode(model, src_tokens: np.ndarray, pad_id: int = PAD_ID) -> tuple[Tensor, np.ndarray]:
    m = _unwrap(model)
    src = _check_tokens(m.descriptor, src_tokens, "src_tokens")
    mask = padding_mask(src, pad_id, m.embed.data.dtype)
    x = _embed(m, src, m.enc_positions, m.enc_ln_embed)
    for layer in m.encoder:
        x = layer(x, mask)
    return x, mask


def forward(model, src_tokens: np.ndarray, tgt_tokens: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Teacher-forced logits of shape (batch, tgt_len, vocab)."""
    m = _unwrap(model)
    memory, src_mask = encode(m, src_tokens, pad_id)
    tgt = _check_tokens(m.descriptor, tgt_tokens, "tgt_tokens")
    if tgt.shape[0] != memory.shape[0]:
        raise ValueError("src_tokens and tgt_tokens batch sizes differ")
    y = _embed(m, tgt, m.dec_positions, m.dec_ln_embed)
    self_mask = causal_mask(tgt.shape[1], m.embed.data.dtype)
    for layer in m.decoder:
        y, _ = layer(y, memory, self_mask, src_mask)
    return nc.linear(y, m.lm_head)


def seq_loss(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Mean next-token cross-entropy over non-pad target positions."""
    return nc.cross_entropy(logits, targets, ignore_index=pad_id)


# ---------------------------------------------------------------- incremental decoding


@dataclass
class DecoderState:
    """Per-hypothesis caches for step-by-step decoding (row i = hypothesis i)."""

    memory: Tensor
    src_mask: np.ndarray
    cross_kv: list
    self_kv: list
    step: int = 0

    def reorder(self, index: np.ndarray) -> None:
        index = np.asarray(index)
        self.memory = Tensor(self.memory.data[index])
        self.src_mask = self.src_mask[index]
        self.cross_kv = [(Tensor(k.data[index]), Tensor(v.data[index])) for k, v in self.cross_kv]
        self.self_kv = [None if kv is None else (Tensor(kv[0].data[index]), Tensor(kv[1].data[index]))
                        for kv in self.self_kv]


def start_decoding(model, src_tokens: np.ndarray, pad_id: int = PAD_ID) -> DecoderState:
    m = _unwrap(model)
    with nc.no_grad():
        memory, mask = encode(m, src_tokens, pad_id)
        cross = [layer.cross_attn.project_kv(memory) for layer in m.decoder]
    return DecoderState(memory, mask, cross, [None] * len(m.decoder))


def decode_step(model, state: DecoderState, tokens: np.ndarray) -> np.ndarray:
    """Feed one token per row; returns next-token log-probabilities (rows, vocab)."""
    m = _unwrap(model)
    tokens = np.asarray(tokens).reshape(-1, 1)
    if state.step >= m.descriptor.max_positions:
        raise ValueError("decoding ran past max_positions")
    with nc.no_grad():
        y = _embed(m, _check_tokens(m.descriptor, tokens, "tokens"), m.dec_positions, m.dec_ln_embed,
                   offset=state.step)
        for i, layer in enumerate(m.decoder):
            y, kv = layer(y, state.memory, None, state.src_mask, past=state.self_kv[i],
                          cross_kv=state.cross_kv[i])
            state.self_kv[i] = kv
        logits = nc.linear(y, m.lm_head).data[:, 0, :].astype(np.float64)
    state.step += 1
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
