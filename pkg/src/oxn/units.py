"""Duration literals used throughout experiment files (``240s``, ``10m``, ``600``)."""

from __future__ import annotations

import math
import re
from typing import Annotated

from pydantic import BeforeValidator, PlainSerializer

_DURATION = re.compile(r"(0|[1-9][0-9]*)(ms|s|m|h)?")
_UNIT_SECONDS = {"ms": 0.001, "s": 1, "m": 60, "h": 3600, None: 1}


class FormatError(ValueError):
    """A duration literal does not match ``<integer><unit>``."""


def parse_duration(text: str | int) -> float:
    """Convert a duration literal to seconds.

    Accepts ``<integer><unit>`` with unit one of ``ms``, ``s``, ``m``, ``h``,
    or a bare integer meaning seconds. Compound forms such as ``1h30m`` are
    rejected.

    >>> parse_duration("240s"), parse_duration("10m"), parse_duration(600)
    (240, 600, 600)
    >>> parse_duration("1500ms")
    1.5
    """
    if isinstance(text, bool):
        raise FormatError(f"not a duration: {text!r}")
    if isinstance(text, int):
        if text < 0:
            raise FormatError(f"negative duration: {text!r}")
        return text
    if not isinstance(text, str):
        raise FormatError(f"not a duration: {text!r}")
    m = _DURATION.fullmatch(text)
    if m is None:
        raise FormatError(f"not a duration: {text!r}")
    value, unit = int(m.group(1)), m.group(2)
    if unit == "ms":
        # keep integral millisecond values exact where possible
        return value // 1000 if value % 1000 == 0 else value / 1000
    return value * _UNIT_SECONDS[unit]


def format_duration(seconds: float) -> str:
    """Canonical literal for a number of seconds (inverse of :func:`parse_duration`)."""
    ms = round(seconds * 1000)
    if ms % 1000:
        return f"{ms}ms"
    return f"{ms // 1000}s"


def _validate_duration(value):
    # already-parsed seconds (re-validation of a stored model) pass through
    if isinstance(value, float) and math.isfinite(value) and value >= 0:
        return value
    try:
        return parse_duration(value)
    except FormatError as exc:
        raise ValueError(str(exc)) from None


Seconds = Annotated[
    float,
    BeforeValidator(_validate_duration),
    PlainSerializer(format_duration, return_type=str, when_used="json"),
]
