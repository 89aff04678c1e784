"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class PixelPromptError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PixelPromptError, ValueError):
    """Configuration file or override could not be parsed or validated."""


class InvalidSpec(ConfigError):
    """A RenderSpec violates its geometric or search invariants."""


class FontUnavailable(PixelPromptError):
    pass


class BackendUnavailable(PixelPromptError):
    """An optional rendering backend's external tools are missing."""


class RenderOverflow(PixelPromptError):
    """Text does not fit on a single page at any candidate font size."""


class TokenizerUnavailable(PixelPromptError):
    pass


class UncalibratedSize(PixelPromptError, KeyError):
    """A calibration-table profile was queried for an image size it lacks."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "uncalibrated size"


class Infeasible(PixelPromptError, ValueError):
    """A generation request cannot be satisfied (e.g. target length too small)."""


class CorpusUnreadable(PixelPromptError):
    pass


class EmptyBatch(PixelPromptError, ValueError):
    pass


class OverflowedPage(PixelPromptError, ValueError):
    """A hybrid prompt was requested for a page whose text did not fit."""


class EndpointError(PixelPromptError):
    """Model endpoint failed after exhausting retries."""


class AuthError(EndpointError):
    """Credentials were rejected; never retried."""


class AllRenderFailed(PixelPromptError):
    pass
