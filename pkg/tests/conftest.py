from __future__ import annotations

import json
import os
import random
from pathlib import Path

import pytest

_MARIMO_VOCAB = Path("/usr/local/lib/python3.10/dist-packages/marimo/_lsp/copilot")
if "PIXELPROMPT_VOCAB_PATH" not in os.environ and _MARIMO_VOCAB.is_dir():
    os.environ["PIXELPROMPT_VOCAB_PATH"] = str(_MARIMO_VOCAB)

_SUBJECTS = ["The city council", "A local bakery", "The national team", "Researchers at the university",
             "The transport agency", "A group of volunteers", "The museum", "Emergency crews",
             "The school board", "A regional airline", "Farmers in the valley", "The health ministry"]
_VERBS = ["announced", "approved", "rejected", "celebrated", "investigated", "postponed", "expanded",
          "criticised", "funded", "reviewed", "launched", "completed"]
_OBJECTS = ["a new recycling programme", "plans for a river bridge", "the winter festival",
            "a study on sleep and memory", "late-night bus routes", "repairs to the old library",
            "a vaccination drive", "the harbour redevelopment", "a summer reading scheme",
            "cheaper flights to the coast", "water rationing rules", "a tree planting campaign"]
_TAILS = ["after months of debate", "despite heavy rain on Tuesday", "with support from residents",
          "according to officials", "ahead of the election", "in a statement on Friday",
          "following complaints from parents", "at a cost of several million dollars"]


def _sentence(rng: random.Random) -> str:
    return f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)} {rng.choice(_TAILS)}."


def make_news_corpus(n: int = 50, seed: int = 7) -> list[dict]:
    """Synthetic article/highlights records in the summarization corpus schema."""
    rng = random.Random(seed)
    records = []
    for i in range(n):
        sentences = [_sentence(rng) for _ in range(rng.randint(28, 40))]
        picks = sorted(rng.sample(range(len(sentences)), 3))
        highlights = "\n".join(sentences[j].rsplit(" ", 2)[0] + "." for j in picks)
        records.append({"id": f"doc-{i:03d}", "article": " ".join(sentences), "highlights": highlights})
    return records


@pytest.fixture(scope="session")
def news_corpus_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("corpus") / "news.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in make_news_corpus()), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def gpt():
    from pixelprompt.tokenomics import get_profile

    return get_profile("gpt")


@pytest.fixture(scope="session")
def qwen():
    from pixelprompt.tokenomics import get_profile

    return get_profile("qwen")


# -- acceptance reporting ----------------------------------------------------------------------

ACCEPTANCE: dict[int, dict] = {}


class AcceptanceRecorder:
    """Collects per-criterion checks; one PASS/FAIL line per criterion is printed at session end."""

    def check(self, criterion: int, title: str, ok: bool, detail: str = "") -> bool:
        entry = ACCEPTANCE.setdefault(criterion, {"title": title, "checks": []})
        entry["checks"].append((bool(ok), detail))
        return bool(ok)

    def skip(self, criterion: int, title: str, reason: str) -> None:
        ACCEPTANCE.setdefault(criterion, {"title": title, "checks": [], "skipped": reason})


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceRecorder:
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        if entry.get("skipped") and not entry["checks"]:
            status, details = "SKIP", entry["skipped"]
        else:
            status = "PASS" if all(ok for ok, _ in entry["checks"]) else "FAIL"
            details = "; ".join(d for _, d in entry["checks"] if d)
        terminalreporter.write_line(f"[{status}] {number:>2}. {entry['title']}: {details}")
