"""Answer scoring, ROUGE and latency aggregation."""

from __future__ import annotations

import json
import re
import shlex
import subprocess
from collections import Counter
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .errors import EmptyBatch, PixelPromptError

_DIGITS = re.compile(r"\d+")
_TOKEN = re.compile(r"[^\W_]+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def exact_match(answer: str, needle_value: str) -> bool:
    """True when ``needle_value`` appears in ``answer`` as a standalone digit run."""
    return needle_value in _DIGITS.findall(answer)


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> RougeScore:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision, recall, f1)


ZERO = RougeScore(0.0, 0.0, 0.0)


def tokenize(text: str, stem: bool = False) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; optionally Porter-stem."""
    tokens = _TOKEN.findall(text.lower())
    if stem:
        try:
            from nltk.stem import porter
        except ImportError as exc:
            raise PixelPromptError("stemming needs the nltk package") from exc
        stemmer = porter.PorterStemmer()
        tokens = [stemmer.stem(t) if len(t) > 3 else t for t in tokens]
    return tokens


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int = 1, *, stem: bool = False) -> RougeScore:
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    cand = _ngrams(tokenize(candidate, stem), n)
    ref = _ngrams(tokenize(reference, stem), n)
    if not cand or not ref:
        return ZERO
    overlap = sum((cand & ref).values())
    return RougeScore.from_pr(overlap / sum(cand.values()), overlap / sum(ref.values()))


def _lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a, 1):
        row, prev = table[i], table[i - 1]
        for j, y in enumerate(b, 1):
            row[j] = prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1])
    return table


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    return _lcs_table(a, b)[-1][-1]


def _lcs_ref_indices(ref: Sequence[str], cand: Sequence[str]) -> list[int]:
    """Positions in ``ref`` covered by one longest common subsequence with ``cand``."""
    table = _lcs_table(ref, cand)
    i, j, hits = len(ref), len(cand), []
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            hits.append(i - 1)
            i, j = i - 1, j - 1
        elif table[i][j - 1] > table[i - 1][j]:
            j -= 1
        else:
            # ties drop the reference token, the convention of the common reference scorer
            i -= 1
    return hits[::-1]


def rouge_l(candidate: str, reference: str, *, stem: bool = False) -> RougeScore:
    cand, ref = tokenize(candidate, stem), tokenize(reference, stem)
    if not cand or not ref:
        return ZERO
    lcs = lcs_length(cand, ref)
    return RougeScore.from_pr(lcs / len(cand), lcs / len(ref))


def split_sentences(text: str) -> list[str]:
    sentences = []
    for line in text.split("\n"):
        sentences += [s for s in _SENTENCE_END.split(line.strip()) if s]
    return sentences


def rouge_lsum(candidate: str, reference: str, *, stem: bool = False) -> RougeScore:
    """Summary-level ROUGE-L over sentence-split inputs (union LCS per reference sentence).

    Each token occurrence is credited at most once on either side, so scores
    stay in [0, 1].
    """
    cand_sents = [t for t in (tokenize(s, stem) for s in split_sentences(candidate)) if t]
    ref_sents = [t for t in (tokenize(s, stem) for s in split_sentences(reference)) if t]
    cand_total = sum(map(len, cand_sents))
    ref_total = sum(map(len, ref_sents))
    if not cand_total or not ref_total:
        return ZERO
    cand_left = Counter(t for s in cand_sents for t in s)
    ref_left = Counter(t for s in ref_sents for t in s)
    hits = 0
    for ref in ref_sents:
        union: set[int] = set()
        for cand in cand_sents:
            union.update(_lcs_ref_indices(ref, cand))
        for idx in sorted(union):
            token = ref[idx]
            if cand_left[token] > 0 and ref_left[token] > 0:
                hits += 1
                cand_left[token] -= 1
                ref_left[token] -= 1
    return RougeScore.from_pr(hits / cand_total, hits / ref_total)


def rouge_all(candidate: str, reference: str, *, stem: bool = False) -> dict[str, RougeScore]:
    return {
        "rouge1": rouge_n(candidate, reference, 1, stem=stem),
        "rouge2": rouge_n(candidate, reference, 2, stem=stem),
        "rougeL": rouge_l(candidate, reference, stem=stem),
        "rougeLsum": rouge_lsum(candidate, reference, stem=stem),
    }


def accuracy(records: Sequence[Any]) -> float:
    """Percentage of records flagged correct."""
    if not records:
        raise EmptyBatch("accuracy of an empty batch")
    if any(r.correct is None for r in records):
        raise ValueError("accuracy needs scored retrieval records (correct is None)")
    return 100.0 * sum(1 for r in records if r.correct) / len(records)


@dataclass(frozen=True)
class LatencyStats:
    mean_s: float
    count: int
    min_s: float
    max_s: float

    def to_dict(self) -> dict[str, Any]:
        return {"mean_s": self.mean_s, "count": self.count, "min_s": self.min_s, "max_s": self.max_s}


def latency_summary(records: Iterable[Any]) -> LatencyStats:
    """Mean, min and max wall-clock seconds over records (or raw floats)."""
    values = sorted(r if isinstance(r, (int, float)) else r.latency_s for r in records)
    if not values:
        raise EmptyBatch("latency summary of an empty batch")
    # sorted summation keeps the mean independent of record order
    return LatencyStats(sum(values) / len(values), len(values), values[0], values[-1])


def run_external_scorer(command: str | Sequence[str], pairs: Sequence[tuple[str, str]],
                        timeout: float | None = None) -> list[float]:
    """Score (candidate, reference) pairs with an external program.

    The program receives one ``{"candidate": ..., "reference": ...}`` JSON
    object per line on stdin and must print one number per line.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    payload = "".join(json.dumps({"candidate": c, "reference": r}) + "\n" for c, r in pairs)
    try:
        proc = subprocess.run(argv, input=payload, capture_output=True, text=True,
                              timeout=timeout, check=True)
    except (OSError, subprocess.SubprocessError) as exc:
        raise PixelPromptError(f"external scorer {argv[0]!r} failed: {exc}") from exc
    scores = [float(line) for line in proc.stdout.splitlines() if line.strip()]
    if len(scores) != len(pairs):
        raise PixelPromptError(f"external scorer returned {len(scores)} scores for {len(pairs)} pairs")
    return scores
