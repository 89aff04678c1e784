"""Prompt assembly, chat-completions transport, response cache and a mock model."""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Union

import httpx

from .corpus import NiahInstance, SummDoc
from .errors import AuthError, ConfigError, EndpointError, OverflowedPage
from .metrics import exact_match, rouge_all, split_sentences
from .render import RenderedPage
from .tokenomics import (
    ModelProfile,
    TokenBudget,
    count_text_tokens,
    estimate_visual_tokens,
    get_profile,
)

log = logging.getLogger(__name__)

NIAH_INSTRUCTION = (
    "A special magic number is hidden within the provided context. Make sure to memorize it. "
    "I will quiz you about the number afterwards. Answer with the number only."
)
SUMM_INSTRUCTION = "You are a news editor. Read the provided article."
SUMM_QUERY = "Summarize the article in three sentences."

Instance = Union[NiahInstance, SummDoc]


class Mode(str, enum.Enum):
    TEXT = "text"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class Prompt:
    """One model input: exactly one context carrier (text or PNG) plus the query."""

    mode: Mode
    query: str
    instruction: str = ""
    context_text: str | None = None
    context_image: bytes | None = None
    image_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        has_text, has_image = self.context_text is not None, self.context_image is not None
        if has_text == has_image:
            raise ValueError("a prompt carries exactly one of context_text / context_image")
        if (self.mode is Mode.TEXT) != has_text:
            raise ValueError(f"{self.mode.value} prompt has the wrong context carrier")

    def messages(self) -> list[dict[str, Any]]:
        """OpenAI-compatible chat messages."""
        if self.mode is Mode.TEXT:
            text = "\n\n".join(p for p in (self.instruction, self.context_text, self.query) if p)
            return [{"role": "user", "content": text}]
        url = "data:image/png;base64," + base64.b64encode(self.context_image).decode("ascii")
        parts: list[dict[str, Any]] = []
        if self.instruction:
            parts.append({"type": "text", "text": self.instruction})
        parts.append({"type": "image_url", "image_url": {"url": url}})
        parts.append({"type": "text", "text": self.query})
        return [{"role": "user", "content": parts}]

    def text_parts(self) -> list[str]:
        return [p for p in (self.instruction, self.query) if p]

    def digest(self) -> str:
        h = hashlib.sha256()
        header = {"mode": self.mode.value, "instruction": self.instruction, "query": self.query,
                  "context_text": self.context_text}
        h.update(json.dumps(header, sort_keys=True).encode())
        if self.context_image is not None:
            h.update(self.context_image)
        return h.hexdigest()


def build_text_prompt(context: str, query: str, instruction: str = "") -> Prompt:
    if not context or not query:
        raise ValueError("context and query must be non-empty")
    return Prompt(Mode.TEXT, query, instruction, context_text=context)


def build_hybrid_prompt(page: RenderedPage, query: str, instruction: str = "") -> Prompt:
    if page.overflowed:
        raise OverflowedPage("page text did not fit; refusing to build a hybrid prompt")
    if not query:
        raise ValueError("query must be non-empty")
    return Prompt(Mode.HYBRID, query, instruction, context_image=page.to_png(), image_size=page.size)


def truncate_answer(raw: str) -> str:
    """Keep the text before the first newline, trimmed."""
    return raw.split("\n", 1)[0].replace("\r", "").strip()


def join_lines(raw: str) -> str:
    return " ".join(line.strip() for line in raw.splitlines() if line.strip())


@dataclass
class EvalRecord:
    instance_id: str
    mode: Mode
    raw_answer: str
    final_answer: str
    budget: TokenBudget
    latency_s: float
    model_name: str
    cached: bool = False
    correct: bool | None = None
    scores: dict[str, float] | None = None
    retried: bool = False
    k_reported: int | None = None

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        data["budget"] = self.budget.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvalRecord:
        data = dict(data)
        data["mode"] = Mode(data["mode"])
        data["budget"] = TokenBudget.from_dict(data["budget"])
        return cls(**data)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int | None = None
    latency_s: float | None = None  # set by simulated endpoints instead of wall clock


class ModelEndpoint(Protocol):
    name: str
    max_retries: int
    backoff_s: float

    def chat(self, prompt: Prompt, instance: Instance | None = None) -> ChatResponse: ...


class TransientEndpointError(EndpointError):
    """A failure worth retrying (network trouble, 429, 5xx)."""


# -- OpenAI-compatible transport ----------------------------------------------------

@dataclass
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4.1-mini"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 120.0
    max_retries: int = 4
    backoff_s: float = 1.0
    max_tokens: int = 256
    parallelism: int = 4
    rate_per_s: float | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EndpointConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown endpoint keys: {sorted(unknown)}")
        return cls(**dict(data))


class OpenAIEndpoint:
    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self.name = config.model
        self.max_retries = config.max_retries
        self.backoff_s = config.backoff_s
        self._client = client or httpx.Client(timeout=config.timeout_s)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def chat(self, prompt: Prompt, instance: Instance | None = None) -> ChatResponse:
        body = {
            "model": self.config.model,
            "messages": prompt.messages(),
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(url, json=body, headers=self._headers())
        except httpx.TransportError as exc:
            raise TransientEndpointError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"credentials rejected by {url} ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientEndpointError(f"{url} answered {resp.status_code}")
        if resp.status_code >= 400:
            raise EndpointError(f"{url} answered {resp.status_code}: {resp.text[:300]}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed response from {url}: {exc}") from exc
        usage = payload.get("usage") or {}
        return ChatResponse(text, usage.get("prompt_tokens"))


# -- mock model ---------------------------------------------------------------------

@dataclass
class MockConfig:
    """Offline stand-in for a multimodal model.

    Text-only retrieval is always answered correctly. Hybrid retrieval is
    answered correctly while the context length m stays at or below
    ``cliff(k)``; past it, correctness becomes a seeded coin flip with
    probability ``p_floor`` (``shape="step"``) or a logistic fall-off
    (``shape="sigmoid"``).
    """

    cliff: dict[int, int] = field(default_factory=dict)
    cliff_ratio: float = 1.66
    p_floor: float = 0.0
    shape: str = "step"
    sigmoid_width: float = 100.0
    degradation: bool = True
    latency_base_s: float = 0.5
    latency_per_token_s: float = 0.0005
    image_overhead_s: float = 0.0
    summary_sentences: int = 3
    profile: str = "gpt-4.1-mini"

    def __post_init__(self) -> None:
        self.cliff = {int(k): int(v) for k, v in dict(self.cliff).items()}
        if self.shape not in ("step", "sigmoid"):
            raise ConfigError(f"mock shape must be 'step' or 'sigmoid', got {self.shape!r}")
        if not 0 <= self.p_floor <= 1:
            raise ConfigError("p_floor must lie in [0, 1]")

    def cliff_for(self, k: int) -> float:
        return self.cliff.get(k, self.cliff_ratio * k)

    def p_correct(self, k: int, m: int) -> float:
        if not self.degradation:
            return 1.0
        cliff = self.cliff_for(k)
        if self.shape == "step":
            return 1.0 if m <= cliff else self.p_floor
        z = (m - cliff) / self.sigmoid_width
        return self.p_floor + (1 - self.p_floor) / (1 + math.exp(min(z, 700)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MockConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown mock keys: {sorted(unknown)}")
        return cls(**dict(data))


def _wrong_number(rng: random.Random, value: str) -> str:
    while True:
        guess = str(rng.randrange(10 ** (len(value) - 1), 10 ** len(value)))
        if guess != value:
            return guess


class MockEndpoint:
    """Deterministic model double; needs the instance behind each prompt."""

    max_retries = 0
    backoff_s = 0.0

    def __init__(self, config: MockConfig | None = None, profile: ModelProfile | None = None):
        self.config = config or MockConfig()
        self.profile = profile or get_profile(self.config.profile)
        self.name = f"mock-{self.profile.name}-{self.config.digest()}"

    def chat(self, prompt: Prompt, instance: Instance | None = None) -> ChatResponse:
        cfg = self.config
        if instance is None:
            raise ValueError("the mock model needs the instance behind the prompt")
        q_len = count_text_tokens(self.profile, prompt.query)
        if prompt.mode is Mode.HYBRID:
            k = estimate_visual_tokens(self.profile, *prompt.image_size)
            tokens = k + q_len
        else:
            k = 0
            tokens = count_text_tokens(self.profile, prompt.context_text) + q_len
        latency = cfg.latency_base_s + cfg.latency_per_token_s * tokens
        if prompt.mode is Mode.HYBRID:
            latency += cfg.image_overhead_s

        if isinstance(instance, SummDoc):
            text = " ".join(split_sentences(instance.source)[: cfg.summary_sentences])
            return ChatResponse(text, None, latency)
        value = instance.needle_value
        correct = True
        if prompt.mode is Mode.HYBRID:
            rng = random.Random(f"mock:{instance.seed}:{k}:{instance.actual_m}")
            p = cfg.p_correct(k, instance.actual_m)
            correct = p >= 1.0 or rng.random() < p
            if not correct:
                value = _wrong_number(rng, value)
        text = f"{value}\nThe special magic number for {instance.needle_key} is {value}."
        return ChatResponse(text, None, latency)


# -- cache and rate limiting --------------------------------------------------------

class ResponseCache:
    """Content-addressed response store: one JSON file per (model, prompt)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(model_name: str, prompt: Prompt) -> str:
        return hashlib.sha256(f"{model_name}\0{prompt.digest()}".encode()).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        path = self._path(key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            self.misses += 1
            return None
        self.hits += 1
        return entry

    def put(self, key: str, entry: Mapping[str, Any]) -> None:
        path = self._path(key)
        with self._write_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(entry, sort_keys=True), encoding="utf-8")
            tmp.replace(path)


class RateLimiter:
    """Spaces call dispatches at least ``1 / rate_per_s`` seconds apart."""

    def __init__(self, rate_per_s: float | None):
        self.interval = 1.0 / rate_per_s if rate_per_s else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            time.sleep(start - now)


# -- the call --------------------------------------------------------------------------

def _instance_id(instance: Instance | None) -> str:
    return instance.instance_id if instance is not None else ""


def complete(
    endpoint: ModelEndpoint,
    prompt: Prompt,
    *,
    profile: ModelProfile,
    instance: Instance | None = None,
    m: int | None = None,
    k: int | None = None,
    cache: ResponseCache | None = None,
    answer_policy: str = "first-line",
    limiter: RateLimiter | None = None,
) -> EvalRecord:
    """Send ``prompt`` at temperature 0 and wrap the answer in an EvalRecord.

    Transient failures are retried with exponential backoff. A first-attempt
    success records only its own call time; a retried success records the
    total elapsed time and is flagged ``retried``.

    Raises:
        AuthError: credentials rejected (not retried).
        EndpointError: retries exhausted or a non-retryable failure.
    """
    q_len = count_text_tokens(profile, prompt.query)
    if m is None:
        if prompt.mode is Mode.TEXT:
            m = count_text_tokens(profile, prompt.context_text)
        elif isinstance(instance, NiahInstance):
            m = instance.actual_m
        elif isinstance(instance, SummDoc):
            m = count_text_tokens(profile, instance.source)
        else:
            m = 0
    if k is None:
        k = estimate_visual_tokens(profile, *prompt.image_size) if prompt.mode is Mode.HYBRID else 0

    key = ResponseCache.key(endpoint.name, prompt) if cache is not None else None
    entry = cache.get(key) if cache is not None else None
    cached = entry is not None
    if entry is None:
        attempts = 0
        started = time.perf_counter()
        while True:
            if limiter is not None:
                limiter.wait()
            dispatched = time.perf_counter()
            try:
                response = endpoint.chat(prompt, instance)
                break
            except AuthError:
                raise
            except TransientEndpointError as exc:
                attempts += 1
                if attempts > endpoint.max_retries:
                    raise EndpointError(f"{endpoint.name}: giving up after {attempts} attempts: {exc}") from exc
                delay = endpoint.backoff_s * 2 ** (attempts - 1)
                log.warning("%s: transient failure (%s); retry %d in %.1fs", endpoint.name, exc, attempts, delay)
                time.sleep(delay)
        finished = time.perf_counter()
        latency = response.latency_s
        if latency is None:
            latency = finished - (started if attempts else dispatched)
        entry = {"raw_answer": response.text, "latency_s": latency,
                 "prompt_tokens": response.prompt_tokens, "retried": attempts > 0}
        if cache is not None:
            cache.put(key, entry)

    k_reported = None
    if prompt.mode is Mode.HYBRID and profile.usage_overrides_k and entry.get("prompt_tokens"):
        text_tokens = sum(count_text_tokens(profile, t) for t in prompt.text_parts())
        k_reported = max(int(entry["prompt_tokens"]) - text_tokens, 1)
        if k_reported != k:
            log.info("%s: API-reported k=%d differs from estimate k=%d", endpoint.name, k_reported, k)
        k = k_reported

    raw = entry["raw_answer"]
    final = truncate_answer(raw) if answer_policy == "first-line" else join_lines(raw)
    record = EvalRecord(
        instance_id=_instance_id(instance),
        mode=prompt.mode,
        raw_answer=raw,
        final_answer=final,
        budget=TokenBudget(m, k, q_len),
        latency_s=float(entry["latency_s"]),
        model_name=endpoint.name,
        cached=cached,
        retried=bool(entry.get("retried", False)),
        k_reported=k_reported,
    )
    if isinstance(instance, NiahInstance):
        record.correct = exact_match(final, instance.needle_value)
    elif isinstance(instance, SummDoc):
        record.scores = {name: s.f1 for name, s in rouge_all(final, instance.reference).items()}
    return record


def mock_complete(instance: Instance, prompt: Prompt, mock_cfg: MockConfig | None = None,
                  profile: ModelProfile | None = None) -> EvalRecord:
    """Answer ``prompt`` with the mock model (see :class:`MockConfig`)."""
    endpoint = MockEndpoint(mock_cfg, profile)
    policy = "join-lines" if isinstance(instance, SummDoc) else "first-line"
    return complete(endpoint, prompt, profile=endpoint.profile, instance=instance, answer_policy=policy)
