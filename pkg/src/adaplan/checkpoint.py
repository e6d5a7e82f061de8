"""Binary model-checkpoint container.

Layout: magic ``ADPL`` | version u16 LE | header length u32 LE | UTF-8 JSON
header | concatenated little-endian float32 blobs.  The header carries enough
metadata (architecture, normalization, schedule constants, loss kind, seed)
to reconstruct the model; blob shapes are derived from it.  Parameters are
stored as float32 and promoted back to float64 on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

MAGIC = b"ADPL"
VERSION = 1


def write_container(path: str | Path, header: dict, blobs: Sequence[np.ndarray]) -> None:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(np.ascontiguousarray(blob, dtype="<f4").tobytes())


class ContainerReader:
    """Sequential reader over a checkpoint's float32 payload."""

    def __init__(self, header: dict, payload: bytes, payload_offset: int):
        self.header = header
        self._payload = payload
        self._base = payload_offset  # file offset where the payload starts
        self._pos = 0

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        """Read the next blob of the given shape, promoted to float64."""
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if self._pos + nbytes > len(self._payload):
            raise FormatError(
                f"truncated checkpoint: wanted {nbytes} bytes for shape {shape}",
                offset=self._base + self._pos,
            )
        flat = np.frombuffer(self._payload, dtype="<f4", count=count, offset=self._pos)
        self._pos += nbytes
        return flat.reshape(shape).astype(np.float64)

    def finish(self) -> None:
        """Verify the payload was consumed exactly."""
        if self._pos != len(self._payload):
            raise FormatError(
                f"{len(self._payload) - self._pos} unexpected trailing bytes",
                offset=self._base + self._pos,
            )


def read_container(path: str | Path) -> ContainerReader:
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise FormatError("file too short for checkpoint preamble", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (header_len,) = struct.unpack_from("<I", data, 6)
    if 10 + header_len > len(data):
        raise FormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid header JSON: {e}", offset=10) from e
    return ContainerReader(header, data[10 + header_len:], 10 + header_len)
