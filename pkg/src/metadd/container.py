"""Binary container shared by model checkpoints and distilled datasets.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"METADD\\x00\\x01"
    offset 8   uint32    format version
    offset 12  uint64    header length L
    offset 20  L bytes   header, UTF-8 JSON with sorted keys
    offset 20+L          body: raw C-order array bytes, concatenated

The header carries ``kind``, free-form metadata and a ``tensors`` table of
``{name, dtype, shape, offset, nbytes}`` where ``offset`` is relative to the
body start. ``saved_at`` is the only field that changes between two saves of
identical content.
"""
import datetime
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"METADD\x00\x01"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(kind: str, meta: dict, arrays: dict, saved_at=None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    if saved_at is None:
        saved_at = datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta,
              "tensors": table, "saved_at": saved_at}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode(data: bytes, expected_kind=None):
    if len(data) < _PREFIX.size:
        raise FormatError("file too short to be a metadd container")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}; not a metadd container")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (this build reads version {FORMAT_VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header (format version {version}): {e}") from None
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise FormatError(f"expected a {expected_kind!r} container, found {header.get('kind')!r}")
    body = start + hlen
    arrays = {}
    for t in header["tensors"]:
        lo = body + t["offset"]
        hi = lo + t["nbytes"]
        if hi > len(data):
            raise FormatError(f"truncated body: tensor {t['name']!r} (format version {version})")
        dt = np.dtype(t["dtype"]).newbyteorder("<")
        arrays[t["name"]] = np.frombuffer(data[lo:hi], dtype=dt).reshape(t["shape"]).copy()
    return header, arrays


def write(path, kind, meta, arrays, saved_at=None):
    atomic_write_bytes(path, encode(kind, meta, arrays, saved_at=saved_at))


def read(path, expected_kind=None):
    with open(path, "rb") as f:
        return decode(f.read(), expected_kind)
