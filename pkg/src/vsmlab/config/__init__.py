"""Configuration constants for vsmlab.

This package contains centralized configuration for:
- Visual themes (emojis, colors)
- Numerical defaults

Config documents (pydantic) live in ``vsmlab.config.schemas``.
"""

from . import defaults
from .theme import Color, Emoji

__all__ = [
    "Emoji",
    "Color",
    "defaults",
]
