"""Shared container for the weight and perturbation files.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
then little-endian float64 payload.
"""

import json
import struct

import numpy as np

_LEN = struct.Struct("<I")


class FormatError(ValueError):
    pass


def write_blob(path, magic, header, arrays):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path, magic):
    """Return ``(header, payload)`` where payload is a flat float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated before header length")
    (n,) = _LEN.unpack_from(raw, 8)
    if len(raw) < 12 + n:
        raise FormatError(f"{path}: truncated header ({len(raw) - 12} of {n} bytes)")
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    body = raw[12 + n:]
    if len(body) % 8:
        raise FormatError(f"{path}: payload length {len(body)} is not a multiple of 8")
    payload = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return header, payload
