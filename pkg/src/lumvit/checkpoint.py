"""Single-file checkpoints.

Layout: ``LUMCKPT1\\n``, an 8-byte little-endian header length, a JSON
header (sorted keys), then raw little-endian arrays at the offsets the
header lists, in sorted name order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"LUMCKPT1\n"


@dataclass
class CheckpointData:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(ckpt: CheckpointData) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        src = np.asarray(ckpt.arrays[name])
        arr = _le(src)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "bool" if src.dtype == bool else arr.dtype.str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(ckpt.meta)
    header["arrays"] = entries
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def save(path, ckpt: CheckpointData) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def loads(buf: bytes) -> CheckpointData:
    if not buf.startswith(MAGIC):
        raise FormatError("not a LUMCKPT1 checkpoint", 0)
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise FormatError("truncated header length", pos)
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + hlen:
        raise FormatError("truncated header", pos)
    try:
        header = json.loads(buf[pos:pos + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FormatError("header is not valid JSON", pos) from None
    pos += hlen
    arrays = {}
    entries = header.pop("arrays")
    for e in entries:
        start = pos + e["offset"]
        end = start + e["nbytes"]
        if end > len(buf):
            raise FormatError(f"array '{e['name']}' runs past end of file", start)
        is_bool = e["dtype"] == "bool"
        dt = np.dtype("u1" if is_bool else e["dtype"])
        arr = np.frombuffer(buf, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        arr = arr.reshape(e["shape"]).copy()
        arrays[e["name"]] = arr.astype(bool) if is_bool else arr.astype(dt.newbyteorder("="))
    expected = pos + sum(e["nbytes"] for e in entries)
    if expected != len(buf):
        raise FormatError("trailing bytes after last array", expected)
    return CheckpointData(header, arrays)


def load(path) -> CheckpointData:
    with open(path, "rb") as fh:
        return loads(fh.read())
