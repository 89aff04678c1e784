"""Text-token counting, visual-token estimation and budget arithmetic."""

from __future__ import annotations

import enum
import functools
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence, Union

from .errors import ConfigError, TokenizerUnavailable, UncalibratedSize

VOCAB_PATH_ENV = "PIXELPROMPT_VOCAB_PATH"


class _Marker(enum.Enum):
    NO_TOLERANCE = "no-tolerance"

    def __repr__(self) -> str:
        return "NO_TOLERANCE"

    def __bool__(self) -> bool:
        return False


NO_TOLERANCE = _Marker.NO_TOLERANCE
"""Returned by :func:`text_token_tolerance` when no curve point qualifies."""

Tolerance = Union[int, _Marker]


# -- visual token rules --------------------------------------------------------

@dataclass(frozen=True)
class ClosedForm:
    """Patch-grid estimate: ceil(w / (patch*merge)) * ceil(h / (patch*merge)) * scale."""

    patch_px: int
    merge: int = 1
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.patch_px <= 0 or self.merge <= 0 or self.scale <= 0:
            raise ConfigError("closed-form patch_px, merge and scale must be positive")

    def estimate(self, width_px: int, height_px: int) -> int:
        cell = self.patch_px * self.merge
        k = math.ceil(width_px / cell) * math.ceil(height_px / cell) * self.scale
        return max(1, int(math.floor(k + 0.5)))

    def sizes(self) -> tuple[tuple[int, int], ...]:
        return ()


@dataclass(frozen=True)
class CalibrationTable:
    """Measured visual-token counts keyed by (width_px, height_px)."""

    entries: Mapping[tuple[int, int], int]

    def __post_init__(self) -> None:
        entries = {(int(w), int(h)): int(k) for (w, h), k in dict(self.entries).items()}
        if any(k <= 0 for k in entries.values()):
            raise ConfigError("calibration entries must have positive k")
        object.__setattr__(self, "entries", entries)

    def estimate(self, width_px: int, height_px: int) -> int:
        try:
            return self.entries[(width_px, height_px)]
        except KeyError:
            known = ", ".join(f"{w}x{h}" for w, h in sorted(self.entries))
            raise UncalibratedSize(
                f"no calibration entry for {width_px}x{height_px}; calibrated sizes: {known}. "
                "Measure k for this size and add it under the profile's calibration table."
            ) from None

    def sizes(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted(self.entries))


VisualTokenRule = Union[ClosedForm, CalibrationTable]


def parse_size(text: str | Sequence[int]) -> tuple[int, int]:
    """Parse ``"600x800"`` (or a 2-sequence) into ``(600, 800)``."""
    if isinstance(text, str):
        parts = text.lower().replace("×", "x").split("x")
        if len(parts) != 2:
            raise ConfigError(f"image size must look like WIDTHxHEIGHT, got {text!r}")
        try:
            w, h = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"image size must look like WIDTHxHEIGHT, got {text!r}") from None
    else:
        w, h = (int(v) for v in text)
    if w <= 0 or h <= 0:
        raise ConfigError(f"image size must be positive, got {w}x{h}")
    return w, h


def format_size(size: tuple[int, int]) -> str:
    return f"{size[0]}x{size[1]}"


@dataclass(frozen=True)
class ModelProfile:
    """A model's tokenizer binding and its visual-token rule.

    ``usage_overrides_k`` marks API-metered models whose reported prompt
    usage replaces the local estimate of k.
    """

    name: str
    tokenizer_id: str
    visual_token_rule: VisualTokenRule
    usage_overrides_k: bool = False

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"name": self.name, "tokenizer_id": self.tokenizer_id,
                                "usage_overrides_k": self.usage_overrides_k}
        rule = self.visual_token_rule
        if isinstance(rule, CalibrationTable):
            data["calibration"] = {format_size(s): k for s, k in sorted(rule.entries.items())}
        else:
            data["closed_form"] = {"patch_px": rule.patch_px, "merge": rule.merge, "scale": rule.scale}
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], name: str | None = None) -> ModelProfile:
        data = dict(data)
        name = data.pop("name", name)
        if not name:
            raise ConfigError("model profile needs a name")
        try:
            tokenizer_id = data.pop("tokenizer_id")
        except KeyError:
            raise ConfigError(f"profile {name!r} is missing tokenizer_id") from None
        calibration = data.pop("calibration", None)
        closed = data.pop("closed_form", None)
        usage = bool(data.pop("usage_overrides_k", False))
        if data:
            raise ConfigError(f"unknown keys in profile {name!r}: {sorted(data)}")
        if (calibration is None) == (closed is None):
            raise ConfigError(f"profile {name!r} needs exactly one of 'calibration' or 'closed_form'")
        if calibration is not None:
            rule: VisualTokenRule = CalibrationTable({parse_size(s): k for s, k in calibration.items()})
        else:
            rule = ClosedForm(**closed)
        return cls(name, tokenizer_id, rule, usage)


# Measured visual-token counts for three page sizes.
BUILTIN_PROFILES: dict[str, ModelProfile] = {
    "gpt-4.1-mini": ModelProfile(
        "gpt-4.1-mini",
        "o200k_base",
        CalibrationTable({(600, 800): 783, (600, 1000): 998, (750, 1000): 1258}),
        usage_overrides_k=True,
    ),
    "qwen2.5-vl-72b": ModelProfile(
        "qwen2.5-vl-72b",
        "cl100k_base",
        CalibrationTable({(600, 800): 635, (600, 1000): 782, (750, 1000): 998}),
    ),
    # patch-grid approximations for sizes outside the calibration tables
    "gpt-4.1-mini-patch": ModelProfile("gpt-4.1-mini-patch", "o200k_base", ClosedForm(32, 1, 1.62),
                                       usage_overrides_k=True),
    "qwen2.5-vl-patch": ModelProfile("qwen2.5-vl-patch", "cl100k_base", ClosedForm(14, 2, 1.0)),
}
PROFILE_ALIASES = {"gpt": "gpt-4.1-mini", "qwen": "qwen2.5-vl-72b"}


def get_profile(name: str, extra: Mapping[str, ModelProfile] | None = None) -> ModelProfile:
    registry = {**BUILTIN_PROFILES, **(extra or {})}
    key = PROFILE_ALIASES.get(name, name) if name not in registry else name
    try:
        return registry[key]
    except KeyError:
        raise ConfigError(f"unknown model profile {name!r}; known: {sorted(registry)}") from None


# -- tokenizers ------------------------------------------------------------------

class Tokenizer(Protocol):
    def encode(self, text: str) -> list[int]: ...


class _Tiktoken:
    def __init__(self, encoding: Any):
        self._enc = encoding

    def encode(self, text: str) -> list[int]:
        return self._enc.encode_ordinary(text)


class _HuggingFace:
    def __init__(self, tokenizer: Any):
        self._tok = tokenizer

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False).ids


def _vocab_dirs() -> list[Path]:
    raw = os.environ.get(VOCAB_PATH_ENV, "")
    return [Path(p).expanduser() for p in raw.split(os.pathsep) if p]


def _load_tiktoken(name: str) -> _Tiktoken:
    try:
        import tiktoken
        import tiktoken_ext.openai_public as openai_public
        from tiktoken.load import load_tiktoken_bpe
    except ImportError as exc:
        raise TokenizerUnavailable("tiktoken is not installed") from exc
    constructor = openai_public.ENCODING_CONSTRUCTORS.get(name)
    for directory in _vocab_dirs():
        path = directory / f"{name}.tiktoken"
        if path.is_file():
            if constructor is None:
                raise TokenizerUnavailable(f"found {path} but {name!r} has no known split pattern")
            # reuse the published split pattern and special tokens, local merge ranks
            original = openai_public.load_tiktoken_bpe
            openai_public.load_tiktoken_bpe = (
                lambda _url, expected_hash=None: load_tiktoken_bpe(str(path), expected_hash))
            try:
                params = constructor()
            finally:
                openai_public.load_tiktoken_bpe = original
            return _Tiktoken(tiktoken.Encoding(**params))
    try:
        return _Tiktoken(tiktoken.get_encoding(name))
    except Exception as exc:  # download failures surface as assorted network errors
        raise TokenizerUnavailable(
            f"vocabulary {name!r} not found; put {name}.tiktoken in a directory listed in "
            f"${VOCAB_PATH_ENV} or make it reachable through tiktoken's cache ({exc})"
        ) from exc


_TOKENIZER_LOCK = threading.Lock()


@functools.lru_cache(maxsize=None)
def _cached_tokenizer(tokenizer_id: str, vocab_path: str) -> Tokenizer:
    if tokenizer_id.startswith("hf:"):
        try:
            from tokenizers import Tokenizer as HFTokenizer
        except ImportError as exc:
            raise TokenizerUnavailable("install the 'tokenizers' package for hf: vocabularies") from exc
        repo = tokenizer_id[3:]
        try:
            local = Path(repo) / "tokenizer.json"
            tok = HFTokenizer.from_file(str(local)) if local.is_file() else HFTokenizer.from_pretrained(repo)
        except Exception as exc:
            raise TokenizerUnavailable(f"cannot load Hugging Face tokenizer {repo!r}: {exc}") from exc
        return _HuggingFace(tok)
    return _load_tiktoken(tokenizer_id.removeprefix("tiktoken:"))


def get_tokenizer(tokenizer_id: str) -> Tokenizer:
    """Load (once) the vocabulary named by ``tokenizer_id``.

    Plain ids (``o200k_base``) and ``tiktoken:<id>`` resolve through tiktoken,
    looking first in ``$PIXELPROMPT_VOCAB_PATH``; ``hf:<repo-or-dir>`` loads a
    Hugging Face ``tokenizer.json``.
    """
    with _TOKENIZER_LOCK:
        return _cached_tokenizer(tokenizer_id, os.environ.get(VOCAB_PATH_ENV, ""))


def count_text_tokens(profile: ModelProfile, text: str) -> int:
    if not text:
        return 0
    return len(get_tokenizer(profile.tokenizer_id).encode(text))


def estimate_visual_tokens(profile: ModelProfile, width_px: int, height_px: int) -> int:
    if width_px <= 0 or height_px <= 0:
        raise ValueError("image dimensions must be positive")
    return profile.visual_token_rule.estimate(width_px, height_px)


def check_calibration(pairs: Iterable[tuple[ModelProfile, tuple[int, int]]]) -> list[str]:
    """Return a message for every (profile, size) pair lacking a k estimate."""
    missing = []
    for profile, (w, h) in pairs:
        try:
            estimate_visual_tokens(profile, w, h)
        except UncalibratedSize:
            missing.append(f"{profile.name} @ {w}x{h}")
    return missing


# -- budgets -----------------------------------------------------------------------

@dataclass(frozen=True)
class TokenBudget:
    m: int
    k: int
    q_len: int
    t_text: int = field(init=False)
    t_img: int = field(init=False)
    rho: float = field(init=False)

    def __post_init__(self) -> None:
        if self.m < 0 or self.k < 0 or self.q_len < 0:
            raise ValueError("token counts must be non-negative")
        if self.k + self.q_len == 0:
            raise ZeroDivisionError("image-mode budget k + q_len is zero")
        object.__setattr__(self, "t_text", self.m + self.q_len)
        object.__setattr__(self, "t_img", self.k + self.q_len)
        object.__setattr__(self, "rho", self.t_text / self.t_img)

    def to_dict(self) -> dict[str, Any]:
        return {"m": self.m, "k": self.k, "q_len": self.q_len,
                "t_text": self.t_text, "t_img": self.t_img, "rho": self.rho}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TokenBudget:
        return cls(int(data["m"]), int(data["k"]), int(data["q_len"]))


def compression_ratio(m: int, k: int, q_len: int = 0) -> TokenBudget:
    """Budget for m context tokens vs k visual tokens, sharing a q_len query."""
    return TokenBudget(m, k, q_len)


def footprint(k: int, m_star: float) -> float:
    return k / m_star


def reduction_pct(m: float, k: float) -> int:
    """Percentage of decoder tokens saved when m context tokens shrink to k."""
    return round(100 * (1 - k / m))


def format_reduction(m: float, k: float) -> str:
    return f"−{reduction_pct(m, k)}%"


# -- tolerance ---------------------------------------------------------------------

@dataclass(frozen=True)
class ToleranceCurve:
    """Hybrid accuracy at each context length m for a fixed visual budget k."""

    k: int
    points: tuple[tuple[int, float], ...]
    baseline_accuracy_pct: float

    def __post_init__(self) -> None:
        points = tuple((int(m), float(a)) for m, a in self.points)
        object.__setattr__(self, "points", points)
        ms = [m for m, _ in points]
        if any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("curve points must be strictly ascending in m")
        if any(not 0 <= a <= 100 for _, a in points) or not 0 <= self.baseline_accuracy_pct <= 100:
            raise ValueError("accuracies must lie in [0, 100]")

    def to_dict(self) -> dict[str, Any]:
        return {"k": self.k, "baseline_accuracy_pct": self.baseline_accuracy_pct,
                "points": [list(p) for p in self.points]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ToleranceCurve:
        return cls(int(data["k"]), tuple(tuple(p) for p in data["points"]),
                   float(data["baseline_accuracy_pct"]))


def text_token_tolerance(curve: ToleranceCurve, delta_pts: float = 3.0) -> Tolerance:
    """Largest m whose accuracy is within ``delta_pts`` of the text-only baseline."""
    if not curve.points:
        raise ValueError("curve has no points")
    floor = curve.baseline_accuracy_pct - delta_pts
    qualifying = [m for m, acc in curve.points if acc >= floor - 1e-9]
    return max(qualifying) if qualifying else NO_TOLERANCE
