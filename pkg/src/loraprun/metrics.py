"""ROUGE-1/2/L, unsmoothed BLEU and the novel n-gram statistic, on token sequences."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from loraprun import _kernels

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SENT_RE = re.compile(r"[.!?](?=\s|$)")


def tokenize(text: str) -> list[str]:
    """Lowercase; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    parts, start = [], 0
    for m in _SENT_RE.finditer(text):
        parts.append(text[start:m.end()])
        start = m.end()
    parts.append(text[start:])
    return [p.strip() for p in parts if p.strip()]


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: int, cand_total: int, ref_total: int) -> "PRF":
        if overlap == 0 or cand_total == 0 or ref_total == 0:
            return cls(0.0, 0.0, 0.0)
        p = overlap / cand_total
        r = overlap / ref_total
        return cls(100.0 * p, 100.0 * r, 100.0 * 2 * p * r / (p + r))


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> PRF:
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((c & r).values())
    return PRF.from_counts(overlap, sum(c.values()), sum(r.values()))


def _interned(a: Sequence, b: Sequence) -> tuple[list[int], list[int]]:
    ids: dict = {}
    return [ids.setdefault(t, len(ids)) for t in a], [ids.setdefault(t, len(ids)) for t in b]


def lcs_length(a: Sequence, b: Sequence) -> int:
    x, y = _interned(a, b)
    return _kernels.lcs_length(x, y)


def rouge_l(candidate: Sequence, reference: Sequence) -> PRF:
    return PRF.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


def bleu(candidate: Sequence, reference: Sequence, max_n: int = 4) -> float:
    """Sentence BLEU x100: uniform geometric mean of clipped precisions times the brevity penalty."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not candidate or not reference:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        c = ngrams(candidate, n)
        total = sum(c.values())
        hit = sum((c & ngrams(reference, n)).values())
        if hit == 0:
            return 0.0
        log_sum += math.log(hit / total)
    bp = 1.0 if len(candidate) >= len(reference) else math.exp(1.0 - len(reference) / len(candidate))
    return 100.0 * bp * math.exp(log_sum / max_n)


def novel_ngram_ratio(source: Sequence, reference: Sequence, n: int) -> float:
    """Percent of distinct reference n-grams that never occur in the source."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ref = set(ngrams(reference, n))
    if not ref:
        raise ValueError(f"reference has no {n}-grams")
    src = set(ngrams(source, n))
    return 100.0 * len(ref - src) / len(ref)


@dataclass
class MetricReport:
    """Per-example scores (x100) with corpus means."""

    rows: list[dict[str, float]] = field(default_factory=list)

    KEYS = ("r1", "r2", "rL", "bleu1", "bleu4")

    def add(self, candidate: Sequence, reference: Sequence) -> dict[str, float]:
        row = {
            "r1": rouge_n(candidate, reference, 1).f1,
            "r2": rouge_n(candidate, reference, 2).f1,
            "rL": rouge_l(candidate, reference).f1,
            "bleu1": bleu(candidate, reference, 1),
            "bleu4": bleu(candidate, reference, 4),
        }
        self.rows.append(row)
        return row

    def mean(self) -> dict[str, float]:
        if not self.rows:
            return {k: 0.0 for k in self.KEYS}
        return {k: math.fsum(r[k] for r in self.rows) / len(self.rows) for k in self.KEYS}

    def __len__(self) -> int:
        return len(self.rows)


def score_corpus(candidates: Iterable[str], references: Iterable[str]) -> MetricReport:
    cands, refs = list(candidates), list(references)
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates but {len(refs)} references")
    report = MetricReport()
    for c, r in zip(cands, refs):
        report.add(tokenize(c), tokenize(r))
    return report


@dataclass(frozen=True)
class CorpusStats:
    examples: int
    src_sents: float
    src_words: float
    tgt_sents: float
    tgt_words: float
    novel_1: float
    novel_2: float

    def as_row(self) -> dict[str, float]:
        return dict(self.__dict__)


def corpus_stats(pairs: Iterable[tuple[str, str]]) -> CorpusStats:
    """Mean sentence/word counts per side and mean percent novel uni/bigrams in the targets."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty dataset")
    acc = [0.0] * 6
    n2 = 0
    for src, tgt in pairs:
        acc[0] += len(split_sentences(src))
        acc[1] += len(src.split())
        acc[2] += len(split_sentences(tgt))
        acc[3] += len(tgt.split())
        s, t = tokenize(src), tokenize(tgt)
        acc[4] += novel_ngram_ratio(s, t, 1)
        if len(t) >= 2:
            acc[5] += novel_ngram_ratio(s, t, 2)
            n2 += 1
    k = len(pairs)
    return CorpusStats(k, acc[0] / k, acc[1] / k, acc[2] / k, acc[3] / k, acc[4] / k,
                       acc[5] / n2 if n2 else 0.0)
