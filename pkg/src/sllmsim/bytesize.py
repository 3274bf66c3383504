"""Byte-size and bandwidth string parsing ("16MiB", "5GB", "512GB/s")."""

from __future__ import annotations

import re

# Binary suffixes are powers of 1024, decimal suffixes powers of 1000.
_UNITS = {
    "": 1,
    "b": 1,
    "k": 1000,
    "kb": 1000,
    "m": 1000**2,
    "mb": 1000**2,
    "g": 1000**3,
    "gb": 1000**3,
    "t": 1000**4,
    "tb": 1000**4,
    "kib": 1024,
    "mib": 1024**2,
    "gib": 1024**3,
    "tib": 1024**4,
}

_SIZE_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*([a-z]*)\s*$")


def parse_bytes(text: str | int | float) -> int:
    """Parse a size like "16MiB" or "5GB" into an integer byte count."""
    if isinstance(text, (int, float)):
        return int(text)
    m = _SIZE_RE.match(text.lower().removesuffix("/s"))
    if not m:
        raise ValueError(f"cannot parse byte size {text!r}")
    value, unit = m.groups()
    if unit not in _UNITS:
        raise ValueError(f"unknown size unit {unit!r} in {text!r}")
    return int(float(value) * _UNITS[unit])


def parse_bandwidth(text: str | int | float) -> float:
    """Parse a bandwidth like "5GB/s" (suffix /s optional) into bytes/second."""
    if isinstance(text, (int, float)):
        return float(text)
    return float(parse_bytes(text))


def format_bytes(n: int | float) -> str:
    """Human-readable byte count, binary units."""
    n = float(n)
    for unit in ("B", "KiB", "MiB", "GiB", "TiB"):
        if abs(n) < 1024 or unit == "TiB":
            if unit == "B":
                return f"{int(n)}B"
            return f"{n:.2f}{unit}"
        n /= 1024
    return f"{n:.2f}TiB"
