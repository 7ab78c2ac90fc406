"""Flat key-value text documents.

Threshold tables and gateway payloads share one trivial format: UTF-8 lines
of "key=value", no sections, no escaping. Writers emit keys in a canonical
order so re-serialization is byte-stable; real numbers are rendered with 17
significant digits, which round-trips any float64 exactly.
"""

from __future__ import annotations

from .errors import FormatError


def render_real(value: float) -> str:
    return format(float(value), ".17g")


def parse_kv(text: str) -> list[tuple[str, str]]:
    """Split a document into (key, value) pairs, preserving order.

    Blank lines are ignored; a line without '=' is a format error.
    """
    pairs: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        pairs.append((key, value))
    return pairs


def render_kv(pairs: list[tuple[str, str]]) -> str:
    return "".join(f"{key}={value}\n" for key, value in pairs)
