"""Beam search and greedy decoding over any next-token log-probability source."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from loraprun import model as mdl

BOS_ID = 1
EOS_ID = 2


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    def score(self, length_norm: float = 1.0) -> float:
        return self.logprob / (max(len(self.tokens), 1) ** length_norm)


class Stepper(Protocol):
    """Incremental scorer: one row of state per live hypothesis."""

    vocab_size: int

    def begin(self, sources: Sequence) -> object: ...

    def step(self, state, tokens: np.ndarray) -> np.ndarray: ...

    def reorder(self, state, index: np.ndarray) -> object: ...


class ModelStepper:
    """Drives a seq2seq model through its key/value-cached decoder."""

    def __init__(self, model, pad_id: int = mdl.PAD_ID):
        self.model = model
        self.pad_id = pad_id
        self.vocab_size = mdl._unwrap(model).descriptor.vocab_size

    def begin(self, sources):
        width = max(len(s) for s in sources)
        src = np.full((len(sources), max(width, 1)), self.pad_id, dtype=np.int64)
        for i, s in enumerate(sources):
            src[i, :len(s)] = s
        return mdl.start_decoding(self.model, src, self.pad_id)

    def step(self, state, tokens):
        return mdl.decode_step(self.model, state, tokens)

    def reorder(self, state, index):
        state.reorder(index)
        return state


class PrefixStepper:
    """Wraps ``fn(source, prefix) -> log-probs``; handy for toy models and oracles."""

    def __init__(self, fn: Callable[[object, tuple], np.ndarray], vocab_size: int):
        self.fn = fn
        self.vocab_size = vocab_size

    def begin(self, sources):
        return {"src": list(sources), "prefix": [() for _ in sources], "started": False}

    def step(self, state, tokens):
        if state["started"]:
            state["prefix"] = [p + (int(t),) for p, t in zip(state["prefix"], tokens)]
        state["started"] = True
        return np.stack([np.asarray(self.fn(s, p), dtype=np.float64)
                         for s, p in zip(state["src"], state["prefix"])])

    def reorder(self, state, index):
        state["src"] = [state["src"][i] for i in index]
        state["prefix"] = [state["prefix"][i] for i in index]
        return state


def _as_stepper(model) -> Stepper:
    if hasattr(model, "step") and hasattr(model, "begin"):
        return model
    return ModelStepper(model)


def _select(rows: list[BeamHypothesis], logp: np.ndarray, width: int) -> list[tuple[int, int, float]]:
    """Top ``width`` (row, token, cumulative) candidates; ties go to the smaller token sequence."""
    total = logp + np.array([h.logprob for h in rows])[:, None]
    flat = total.ravel()
    if flat.size > width:
        cut = np.partition(flat, flat.size - width)[flat.size - width]
        idx = np.flatnonzero(flat >= cut)
    else:
        idx = np.arange(flat.size)
    v = logp.shape[1]
    cands = [(int(i) // v, int(i) % v, float(flat[i])) for i in idx]
    cands.sort(key=lambda c: (-c[2], rows[c[0]].tokens + (c[1],)))
    return cands[:width]


def beam_search_batch(model, sources: Sequence[Sequence[int]], width: int = 6, max_len: int = 128,
                      length_norm: float = 1.0, bos_id: int = BOS_ID, eos_id: int = EOS_ID
                      ) -> list[BeamHypothesis]:
    """Independent beams for each source, sharing one batched decoder call per step."""
    if width < 1 or max_len < 1:
        raise ValueError("width and max_len must be >= 1")
    stepper = _as_stepper(model)
    if not 0 <= eos_id < stepper.vocab_size:
        raise ValueError(f"EOS id {eos_id} is outside the vocabulary (size {stepper.vocab_size})")
    n = len(sources)
    state = stepper.begin(sources)
    live: list[list[BeamHypothesis]] = [[BeamHypothesis((), 0.0, False)] for _ in range(n)]
    done: list[list[BeamHypothesis]] = [[] for _ in range(n)]
    last = np.full(n, bos_id, dtype=np.int64)
    for t in range(max_len):
        logp = stepper.step(state, last)
        index, tokens = [], []
        offset = 0
        for b in range(n):
            rows = live[b]
            block = logp[offset:offset + len(rows)]
            nxt = []
            for r, tok, total in _select(rows, block, width):
                hyp = BeamHypothesis(rows[r].tokens + (tok,), total, tok == eos_id or t == max_len - 1)
                if hyp.finished:
                    done[b].append(hyp)
                else:
                    nxt.append(hyp)
                    index.append(offset + r)
                    tokens.append(tok)
            offset += len(rows)
            live[b] = nxt
        if not index:
            break
        state = stepper.reorder(state, np.array(index, dtype=np.int64))
        last = np.array(tokens, dtype=np.int64)
    return [min(d, key=lambda h: (-h.score(length_norm), h.tokens)) for d in done]


def beam_search(model, src_tokens: Sequence[int], width: int = 6, max_len: int = 128,
                length_norm: float = 1.0, bos_id: int = BOS_ID, eos_id: int = EOS_ID) -> list[int]:
    """Best finished hypothesis under ``sum log p / len ** length_norm`` (EOS included)."""
    hyp = beam_search_batch(model, [list(src_tokens)], width, max_len, length_norm, bos_id, eos_id)[0]
    return list(hyp.tokens)


def greedy(model, src_tokens: Sequence[int], max_len: int = 128, bos_id: int = BOS_ID,
           eos_id: int = EOS_ID) -> list[int]:
    return beam_search(model, src_tokens, 1, max_len, 1.0, bos_id, eos_id)


def greedy_batch(model, sources: Sequence[Sequence[int]], max_len: int = 128, bos_id: int = BOS_ID,
                 eos_id: int = EOS_ID) -> list[list[int]]:
    """Argmax rollout for many sources at once; rows stay in place until all have emitted EOS."""
    stepper = _as_stepper(model)
    if not 0 <= eos_id < stepper.vocab_size:
        raise ValueError(f"EOS id {eos_id} is outside the vocabulary (size {stepper.vocab_size})")
    state = stepper.begin(sources)
    out: list[list[int]] = [[] for _ in sources]
    active = np.ones(len(sources), dtype=bool)
    last = np.full(len(sources), bos_id, dtype=np.int64)
    for _ in range(max_len):
        nxt = stepper.step(state, last).argmax(axis=1)
        for i in np.flatnonzero(active):
            out[i].append(int(nxt[i]))
            if nxt[i] == eos_id:
                active[i] = False
        if not active.any():
            break
        last = np.where(active, nxt, eos_id).astype(np.int64)
    return out


def strip_special(tokens: Sequence[int], eos_id: int = EOS_ID) -> list[int]:
    tokens = list(tokens)
    return tokens[:tokens.index(eos_id)] if eos_id in tokens else tokens
