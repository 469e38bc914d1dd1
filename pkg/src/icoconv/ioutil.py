"""Shared file-output helpers: atomic writes and header conventions.

Every artifact written by this package carries {tool_version, format_version,
seed} in its header so runs are traceable and byte-reproducible.  Writes go
through a temporary file in the destination directory followed by an atomic
rename.
"""
from __future__ import annotations

import json
import os
import tempfile

from . import __version__


def fmt17(x: float) -> str:
    """Format a double with 17 significant digits (lossless round-trip)."""
    return format(float(x), ".17g")


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def header_dict(format_version: int, seed: int | None, **extra) -> dict:
    head = {"format_version": format_version, "tool_version": __version__, "seed": seed}
    head.update(extra)
    return head


def pack_header(head: dict, magic: bytes) -> bytes:
    """Binary artifact prefix: 8-byte magic, u32 length, UTF-8 JSON header."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    return magic + len(blob).to_bytes(4, "little") + blob


def unpack_header(payload: bytes, magic: bytes) -> tuple[dict, int]:
    """Parse a binary artifact prefix; returns (header, offset of body)."""
    if payload[:8] != magic:
        raise ValueError(f"bad magic: expected {magic!r}, found {payload[:8]!r}")
    n = int.from_bytes(payload[8:12], "little")
    head = json.loads(payload[12 : 12 + n].decode("utf-8"))
    return head, 12 + n


def csv_header_lines(format_version: int, seed: int | None, **extra) -> list[str]:
    head = header_dict(format_version, seed, **extra)
    return [f"# {key}={head[key]}" for key in head]
