"""Render long LLM contexts as page images and account for the token savings."""

__version__ = "0.1.0"
