"""Loading candidate byte streams and slicing them into inspectable chunks."""

from __future__ import annotations

import string
import sys
from dataclasses import dataclass
from pathlib import Path

DEFAULT_CHUNK_MAX = 64 * 1024
DEFAULT_OVERLAP = 4 * 1024
DEFAULT_BASE = 0x00400000

_HEX_DIGITS = frozenset(string.hexdigits)


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DataBuffer:
    data: bytes
    base: int = DEFAULT_BASE
    origin: tuple[str, int] | None = None  # (source, stream offset)

    def __len__(self) -> int:
        return len(self.data)


def decode_hex(text: str) -> bytes:
    """Decode hex digits, ignoring whitespace (an optional ``0x`` per token is allowed)."""
    digits = []
    for token in text.split():
        if token[:2].lower() == "0x":
            token = token[2:]
        digits.append(token)
    joined = "".join(digits)
    bad = set(joined) - _HEX_DIGITS
    if bad:
        raise FormatError(f"non-hex characters: {''.join(sorted(bad))!r}")
    if len(joined) % 2:
        raise FormatError("odd number of hex digits")
    return bytes.fromhex(joined)


def load_input(source: str | Path, fmt: str = "raw") -> bytes:
    """Read ``source`` (a path, or ``-`` for standard input) as raw bytes or hex text."""
    if fmt not in ("raw", "hex"):
        raise FormatError(f"unknown input format {fmt!r}")
    if str(source) == "-":
        raw = sys.stdin.buffer.read()
    else:
        raw = Path(source).read_bytes()
    if fmt == "raw":
        return raw
    try:
        return decode_hex(raw.decode("ascii"))
    except UnicodeDecodeError as exc:
        raise FormatError("hex input is not ASCII") from exc


def chunk_stream(data: bytes, max_len: int = DEFAULT_CHUNK_MAX, overlap: int = DEFAULT_OVERLAP, *,
                 source: str = "stream", base: int = DEFAULT_BASE, prefix_only: bool = False) -> list[DataBuffer]:
    """Split ``data`` into chunks of at most ``max_len`` bytes.

    Each chunk after the first starts ``overlap`` bytes before the end of the
    previous one, so anything no longer than ``overlap`` that straddles a
    boundary is intact in the following chunk.
    """
    if not 0 <= overlap < max_len:
        raise ValueError("need 0 <= overlap < max_len")
    chunks = []
    start = 0
    n = len(data)
    while start < n:
        end = min(n, start + max_len)
        chunks.append(DataBuffer(bytes(data[start:end]), base, (source, start)))
        if end == n or prefix_only:
            break
        start = end - overlap
    return chunks


def reassemble(chunks: list[DataBuffer]) -> bytes:
    """Inverse of :func:`chunk_stream` (drops the overlapping prefixes)."""
    out = bytearray()
    for chunk in chunks:
        offset = chunk.origin[1] if chunk.origin else len(out)
        out[offset:] = chunk.data
    return bytes(out)
