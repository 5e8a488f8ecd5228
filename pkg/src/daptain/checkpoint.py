"""Binary tensor container shared by models, classifiers and feature dumps.

Layout::

    b"VCAE1" | version u8 | records... | crc32 u32

    record = name_len u16 | name utf-8 | rank u8 | dims u32 * rank
             | dtype u8 | payload (little-endian)

dtype 0 is float32. dtype 1 (raw bytes) carries the JSON metadata record
``__meta__``. The CRC covers every byte before it. All integers are
little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"VCAE1"
VERSION = 1
META_KEY = "__meta__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def encode(tensors, meta=None) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    items = list(tensors.items())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        items.append((META_KEY, np.frombuffer(blob, dtype="u1")))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            arr = arr.astype("<f4")
        code = 1 if arr.dtype == np.uint8 else 0
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes):
    if len(data) < len(MAGIC) + 5 or data[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a VCAE1 container")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    version = body[len(MAGIC)]
    if version != VERSION:
        raise IntegrityError(f"unsupported container version {version}")
    pos = len(MAGIC) + 1
    tensors = OrderedDict()
    meta = None
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rank = body[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dtype = _DTYPES[body[pos]]
            pos += 1
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise IntegrityError(f"record {name!r} truncated")
            arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            pos += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode())
            else:
                tensors[name] = arr.reshape(dims).astype(np.float32)
    except (struct.error, KeyError, UnicodeDecodeError, ValueError) as exc:
        raise IntegrityError(f"malformed container: {exc}") from None
    return tensors, meta


def save(path, tensors, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, meta))


def load(path):
    return decode(Path(path).read_bytes())
