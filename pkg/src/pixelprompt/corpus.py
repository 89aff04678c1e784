"""Needle-in-a-haystack generation and summarization corpus loading."""

from __future__ import annotations

import functools
import json
import logging
import random
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from .errors import CorpusUnreadable, Infeasible
from .tokenomics import ModelProfile, count_text_tokens, get_tokenizer

log = logging.getLogger(__name__)

NEEDLE_TEMPLATE = "One of the special magic numbers for {key} is: {value}."
QUERY_TEMPLATE = "What is the special magic number for {key} mentioned in the provided text?"
MIN_TARGET_M = 50
LENGTH_TOLERANCE = 0.01
VALUE_DIGITS = 7
PAD_WORD = "yes"

_ADJECTIVES = (
    "abundant amber ancient brave bright calm clever crimson curious dusty eager fancy fearless "
    "gentle golden hidden humble icy jolly keen lively lucky misty noble odd pale patient proud "
    "quiet rapid rustic silent silver steady swift tender upbeat vivid wandering wise witty young"
).split()
_NOUNS = (
    "anchor badger beacon canyon cedar comet copper dolphin ember falcon forest garden glacier "
    "harbor island jungle kettle lantern meadow mirror nectar oasis orchard pebble pepper quartz "
    "raven river saddle summit thistle tiger tulip valley velvet walrus willow yarrow zephyr"
).split()


@functools.lru_cache(maxsize=1)
def distractor_pool() -> tuple[str, ...]:
    """Filler sentences bundled in ``data/distractors.txt``."""
    text = resources.files("pixelprompt").joinpath("data/distractors.txt").read_text("utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


def needle_pattern(template: str = NEEDLE_TEMPLATE) -> re.Pattern[str]:
    """Regex matching any needle sentence built from ``template``."""
    escaped = re.escape(template)
    escaped = escaped.replace(re.escape("{key}"), r"(?P<key>[\w-]+)")
    escaped = escaped.replace(re.escape("{value}"), r"(?P<value>\d+)")
    return re.compile(escaped)


@dataclass(frozen=True)
class NiahInstance:
    haystack: str
    needle_key: str
    needle_value: str
    query: str
    target_m: int
    actual_m: int
    seed: int

    @property
    def instance_id(self) -> str:
        return f"niah-m{self.target_m}-s{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> NiahInstance:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class SummDoc:
    doc_id: str
    source: str
    reference: str

    @property
    def instance_id(self) -> str:
        return self.doc_id


def _sentence_stream(rng: random.Random) -> Iterator[str]:
    pool = list(distractor_pool())
    while True:
        rng.shuffle(pool)
        yield from pool


def gen_niah(
    target_m: int,
    profile: ModelProfile,
    seed: int,
    *,
    template: str = NEEDLE_TEMPLATE,
    query_template: str = QUERY_TEMPLATE,
) -> NiahInstance:
    """Build a haystack of ``target_m`` tokens (within 1%) hiding one needle.

    Distractor sentences are drawn from the shuffled pool, the needle sentence
    is inserted at a uniformly drawn slot between them, and single filler
    words are appended until the passage reaches the target.

    Raises:
        Infeasible: ``target_m`` is below the 50-token floor or cannot be hit.
    """
    if target_m < MIN_TARGET_M:
        raise Infeasible(f"target_m={target_m} is below the {MIN_TARGET_M}-token floor")
    tokenizer = get_tokenizer(profile.tokenizer_id)

    def count(text: str) -> int:
        return len(tokenizer.encode(text))

    rng = random.Random(f"niah:{seed}")
    key = f"{rng.choice(_ADJECTIVES)}-{rng.choice(_NOUNS)}"
    value = str(rng.randrange(10 ** (VALUE_DIGITS - 1), 10 ** VALUE_DIGITS))
    needle = template.format(key=key, value=value)
    depth = rng.random()

    # fill with whole distractors while staying under budget, so the needle's
    # slot is never disturbed by trimming afterwards
    budget = target_m - count(needle) - 1
    stream = _sentence_stream(rng)
    sentences = [next(stream)]
    total = count(sentences[0])
    while True:
        sentence = next(stream)
        cost = count(" " + sentence)
        if total + cost > budget:
            break
        sentences.append(sentence)
        total += cost
    position = min(int(depth * (len(sentences) + 1)), len(sentences))
    parts = sentences[:position] + [needle] + sentences[position:]

    lo = target_m * (1 - LENGTH_TOLERANCE)
    hi = target_m * (1 + LENGTH_TOLERANCE)
    text = " ".join(parts)
    actual = count(text)
    while actual > target_m and len(parts) > 2:
        # token merges at sentence joins can overshoot by a token or two
        drop = len(parts) - 1 if parts[-1] != needle else len(parts) - 2
        del parts[drop]
        text = " ".join(parts)
        actual = count(text)
    base, padding = text, 0
    while actual < target_m and padding < target_m:
        padding += 1
        text = base + (" " + PAD_WORD) * padding
        actual = count(text)
    if not lo <= actual <= hi:
        raise Infeasible(f"could not hit target_m={target_m} within 1% (got {actual})")
    return NiahInstance(
        haystack=text,
        needle_key=key,
        needle_value=value,
        query=query_template.format(key=key),
        target_m=target_m,
        actual_m=actual,
        seed=seed,
    )


def save_niah_jsonl(path: str | Path, instances: Iterable[NiahInstance]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_niah_jsonl(path: str | Path) -> list[NiahInstance]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return [NiahInstance.from_dict(json.loads(line)) for line in lines if line.strip()]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorpusUnreadable(f"cannot read NIAH instances from {path}: {exc}") from exc


@dataclass
class CorpusLoad:
    """Documents read from a corpus file plus the number of skipped records."""

    docs: list[SummDoc]
    skipped: int = 0

    def __iter__(self) -> Iterator[SummDoc]:
        return iter(self.docs)

    def __len__(self) -> int:
        return len(self.docs)

    def __getitem__(self, index):
        return self.docs[index]


def load_summarization_corpus(path: str | Path, limit: int | None = None) -> CorpusLoad:
    """Read ``{"id", "article", "highlights"}`` records, one JSON object per line.

    Malformed records are skipped with a warning; the count is kept on the
    returned :class:`CorpusLoad`.

    Raises:
        CorpusUnreadable: the file itself cannot be opened or decoded.
    """
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusUnreadable(f"cannot read corpus {path}: {exc}") from exc
    result = CorpusLoad([])
    for lineno, line in enumerate(raw.splitlines(), 1):
        if limit is not None and len(result.docs) >= limit:
            break
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            doc = SummDoc(str(record["id"]), record["article"], record["highlights"])
            if not (isinstance(doc.source, str) and isinstance(doc.reference, str)):
                raise TypeError("article and highlights must be strings")
            if not doc.source.strip() or not doc.reference.strip():
                raise ValueError("empty article or highlights")
        except (ValueError, KeyError, TypeError) as exc:
            result.skipped += 1
            log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
            continue
        result.docs.append(doc)
    return result


def mean_token_length(docs: Iterable[SummDoc], profile: ModelProfile) -> float:
    lengths = [count_text_tokens(profile, d.source) for d in docs]
    if not lengths:
        raise ValueError("no documents")
    return sum(lengths) / len(lengths)
