"""Tokenizers, section-pattern pair extraction, a seeded synthetic report corpus, and batching."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class Vocab:
    """Token/id bijection with four reserved ids; ``mode`` is ``char`` or ``word``."""

    def __init__(self, tokens: Sequence[str], mode: str = "char"):
        if mode not in ("char", "word"):
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        self.mode = mode
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.mode == other.mode and self.itos == other.itos

    def split(self, text: str) -> list[str]:
        return list(text) if self.mode == "char" else text.split()

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in self.split(text)]

    def decode(self, ids: Iterable[int]) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            toks.append(self.itos[i] if 0 <= i < len(self.itos) else UNK)
        return ("" if self.mode == "char" else " ").join(toks)

    def to_text(self) -> str:
        return f"{self.mode}\n" + "\n".join(repr(t) for t in self.itos[len(RESERVED):])

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        import ast

        mode, *rest = text.split("\n")
        return cls([ast.literal_eval(line) for line in rest if line], mode)


def build_vocab(texts: Iterable[str], mode: str = "char", max_size: int | None = None) -> Vocab:
    """Most frequent tokens first (ties broken alphabetically), capped at ``max_size`` ids in total."""
    if max_size is not None and max_size < len(RESERVED):
        raise ValueError(f"max_size must be >= {len(RESERVED)}")
    probe = Vocab([], mode)
    counts: Counter = Counter()
    seen = False
    for t in texts:
        seen = True
        counts.update(probe.split(t))
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t in counts if t not in RESERVED), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size - len(RESERVED)]
    return Vocab(ranked, mode)


# ---------------------------------------------------------------- extraction

@dataclass(frozen=True)
class SectionPatternSpec:
    body_markers: tuple[str, ...]
    summary_markers: tuple[str, ...]
    case_insensitive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "body_markers", tuple(self.body_markers))
        object.__setattr__(self, "summary_markers", tuple(self.summary_markers))
        if not self.body_markers or not self.summary_markers:
            raise ValueError("both marker lists must be non-empty")
        norm = (lambda s: s.lower()) if self.case_insensitive else (lambda s: s)
        if {norm(m) for m in self.body_markers} & {norm(m) for m in self.summary_markers}:
            raise ValueError("body and summary markers must be disjoint")
        if any(not m.strip() for m in self.body_markers + self.summary_markers):
            raise ValueError("markers must be non-blank")

    def to_text(self) -> str:
        lines = ["[body]", *self.body_markers, "", "[summary]", *self.summary_markers]
        if not self.case_insensitive:
            lines = ["[options]", "case_insensitive = false", ""] + lines
        return "\n".join(lines) + "\n"


RADIOLOGY_SPEC = SectionPatternSpec(("findings:",), ("impression:",))


def parse_pattern_spec(text: str) -> SectionPatternSpec:
    """Read ``[body]`` / ``[summary]`` blocks, one marker per line; ``#`` starts a comment."""
    groups: dict[str, list[str]] = {"body": [], "summary": [], "options": []}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = re.fullmatch(r"\[(\w+)\]", line)
        if head:
            current = head.group(1).lower()
            if current not in groups:
                raise ValueError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise ValueError(f"line {lineno}: marker outside a [body]/[summary] section")
        groups[current].append(line)
    case_insensitive = True
    for opt in groups["options"]:
        key, _, value = opt.partition("=")
        if key.strip() != "case_insensitive":
            raise ValueError(f"unknown option {key.strip()!r}")
        case_insensitive = value.strip().lower() in ("1", "true", "yes")
    return SectionPatternSpec(tuple(groups["body"]), tuple(groups["summary"]), case_insensitive)


def load_pattern_spec(path: str | Path) -> SectionPatternSpec:
    return parse_pattern_spec(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Seq2SeqExample:
    source: str
    target: str
    id: str = ""


def _marker_regex(spec: SectionPatternSpec) -> re.Pattern:
    markers = sorted(spec.body_markers + spec.summary_markers, key=len, reverse=True)
    flags = re.IGNORECASE if spec.case_insensitive else 0
    return re.compile("|".join(re.escape(m) for m in markers), flags)


def extract_pairs(document: str, spec: SectionPatternSpec, id: str = "") -> Seq2SeqExample | None:
    """Split at every marker occurrence; gather body and summary sections in document order.

    Text before the first marker is ignored.  Returns None when either side is empty.
    """
    fold = (lambda s: s.lower()) if spec.case_insensitive else (lambda s: s)
    body = {fold(m) for m in spec.body_markers}
    hits = list(_marker_regex(spec).finditer(document))
    src, tgt = [], []
    for k, m in enumerate(hits):
        end = hits[k + 1].start() if k + 1 < len(hits) else len(document)
        text = " ".join(document[m.end():end].split())
        if text:
            (src if fold(m.group(0)) in body else tgt).append(text)
    if not src or not tgt:
        return None
    return Seq2SeqExample(" ".join(src), " ".join(tgt), id)


def render(example: Seq2SeqExample, spec: SectionPatternSpec) -> str:
    """Inverse of extract_pairs: one body section followed by one summary section."""
    return f"{spec.body_markers[0]} {example.source} {spec.summary_markers[0]} {example.target}"


# ---------------------------------------------------------------- synthetic corpus

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    """Pseudo-reports with history and findings sections and an impression.

    ``mode="summary"``: the impression restates the findings, with a fixed fraction
    ``noise`` of the lexicon always replaced by an out-of-source synonym.
    ``mode="copy"``: a single section copied verbatim (a pretraining stand-in).
    ``findings_first`` puts the findings before the history section.
    """

    n_examples: int = 2000
    lexicon_size: int = 120
    context_words: tuple[int, int] = (2, 4)
    findings_words: tuple[int, int] = (3, 5)
    noise: float = 0.0
    mode: str = "summary"
    findings_first: bool = True

    def __post_init__(self):
        if self.mode not in ("summary", "copy"):
            raise ValueError(f"unknown synth mode {self.mode!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        lo, hi = self.findings_words
        if self.n_examples < 1 or lo < 1 or hi < lo or hi > self.lexicon_size:
            raise ValueError("invalid synth sizes")
        if self.context_words[0] < 0 or self.context_words[1] < self.context_words[0]:
            raise ValueError("invalid context word range")

    @property
    def n_synonyms(self) -> int:
        return int(round(self.noise * self.lexicon_size))

    def expected_novel_unigram(self) -> float:
        """Exact mean type-level novel unigram percentage (the trailing period is never novel)."""
        if self.mode == "copy":
            return 0.0
        lo, hi = self.findings_words
        frac = self.n_synonyms / self.lexicon_size
        return 100.0 * float(np.mean([frac * k / (k + 1) for k in range(lo, hi + 1)]))


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < count:
        syll = int(rng.integers(1, 4))
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syll))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SynthCorpus:
    spec: SynthSpec
    lexicon: list[str]
    synonyms: dict[str, str]
    documents: list[tuple[str, str]] = field(default_factory=list)
    examples: list[Seq2SeqExample] = field(default_factory=list)

    pattern = SectionPatternSpec(("history:", "findings:"), ("impression:",))


def synth_corpus(spec: SynthSpec, seed: int = 0) -> SynthCorpus:
    """Deterministic corpus; documents are rendered then run back through extract_pairs."""
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    lexicon = _pseudo_words(rng, spec.lexicon_size, taken)
    syn_src = rng.permutation(spec.lexicon_size)[:spec.n_synonyms]
    synonyms = dict(zip((lexicon[i] for i in sorted(syn_src)), _pseudo_words(rng, spec.n_synonyms, taken)))
    corpus = SynthCorpus(spec, lexicon, synonyms)
    lo, hi = spec.findings_words
    clo, chi = spec.context_words
    for i in range(spec.n_examples):
        k = int(rng.integers(lo, hi + 1))
        words = [lexicon[j] for j in rng.choice(spec.lexicon_size, size=k, replace=False)]
        findings = " ".join(words) + "."
        if spec.mode == "copy":
            doc = f"findings: {findings} impression: {findings}"
        else:
            c = int(rng.integers(clo, chi + 1))
            context = " ".join(lexicon[j] for j in rng.integers(0, spec.lexicon_size, size=c))
            impression = " ".join(synonyms.get(w, w) for w in words) + "."
            history = f"history: {context}. " if c else ""
            if spec.findings_first:
                doc = f"findings: {findings} {history}impression: {impression}"
            else:
                doc = f"{history}findings: {findings} impression: {impression}"
        ex = extract_pairs(doc, corpus.pattern, id=f"s{seed}-{i}")
        assert ex is not None
        corpus.documents.append((ex.id, doc))
        corpus.examples.append(ex)
    return corpus


# ---------------------------------------------------------------- files and splits

def _clean(text: str) -> str:
    return " ".join(text.replace("\t", " ").split())


def write_tsv(path: str | Path, examples: Iterable[Seq2SeqExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{_clean(ex.source)}\t{_clean(ex.target)}\n")
            n += 1
    return n


def read_tsv(path: str | Path) -> list[Seq2SeqExample]:
    """One ``source<TAB>target`` pair per line; ids are ``<file stem>-<line number>``."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
            src, tgt = parts[0].strip(), parts[1].strip()
            if not src or not tgt:
                raise ValueError(f"{path}:{lineno}: empty source or target")
            out.append(Seq2SeqExample(src, tgt, f"{path.stem}-{lineno}"))
    return out


def split_of(example_id: str) -> str:
    """Stable 80/10/10 assignment from a hash of the example id."""
    bucket = int.from_bytes(hashlib.sha256(example_id.encode("utf-8")).digest()[:8], "big") % 10
    return "train" if bucket < 8 else ("valid" if bucket == 8 else "test")


def split_examples(examples: Iterable[Seq2SeqExample]) -> dict[str, list[Seq2SeqExample]]:
    parts: dict[str, list[Seq2SeqExample]] = {"train": [], "valid": [], "test": []}
    for ex in examples:
        parts[split_of(ex.id)].append(ex)
    return parts


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class EncodedExample:
    src: np.ndarray
    tgt: np.ndarray
    id: str = ""


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    ids: tuple[str, ...]

    @property
    def n_tokens(self) -> int:
        """Non-pad source plus target tokens processed by one training step."""
        return int((self.src != PAD_ID).sum() + (self.tgt_out != PAD_ID).sum())

    def __len__(self) -> int:
        return self.src.shape[0]


def encode_examples(examples: Iterable[Seq2SeqExample], vocab: Vocab) -> list[EncodedExample]:
    return [EncodedExample(np.array(vocab.encode(e.source), dtype=np.int64),
                           np.array(vocab.encode(e.target), dtype=np.int64), e.id) for e in examples]


def collate(items: Sequence[EncodedExample], max_src_len: int, max_tgt_len: int) -> Batch:
    """Truncate, add BOS/EOS around targets and right-pad to the batch maximum."""
    if max_src_len < 1 or max_tgt_len < 2:
        raise ValueError("max_src_len must be >= 1 and max_tgt_len >= 2")
    srcs = [e.src[:max_src_len] for e in items]
    tgts = [e.tgt[:max_tgt_len - 1] for e in items]
    n = len(items)
    s_len = max(1, max(len(s) for s in srcs))
    t_len = max(len(t) for t in tgts) + 1
    src = np.full((n, s_len), PAD_ID, dtype=np.int64)
    tin = np.full((n, t_len), PAD_ID, dtype=np.int64)
    tout = np.full((n, t_len), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src[i, :len(s)] = s
        tin[i, 0] = BOS_ID
        tin[i, 1:len(t) + 1] = t
        tout[i, :len(t)] = t
        tout[i, len(t)] = EOS_ID
    return Batch(src, tin, tout, tuple(e.id for e in items))


def batches(dataset: Sequence[EncodedExample], batch_size: int, max_src_len: int, max_tgt_len: int,
            seed: int = 0, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Deterministic order per (seed, epoch); the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield collate([dataset[i] for i in order[start:start + batch_size]], max_src_len, max_tgt_len)
