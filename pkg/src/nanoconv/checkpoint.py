"""Self-describing single-file parameter container.

Layout::

    8 bytes   magic  b"NCCKPT\\x00\\x01"
    4 bytes   format version (uint32, little-endian)
    8 bytes   manifest length M (uint64, little-endian)
    M bytes   manifest JSON (utf-8)
    ...       payload: each array's raw little-endian values, back to back

The manifest lists every array's name, shape, dtype, byte offset and byte
length plus a free-form ``meta`` dict (config snapshot etc). Loading only
trusts the manifest, and validates it fully before returning anything.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError, InvalidArgument

MAGIC = b"NCCKPT\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1", "<c8", "<c16"}


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def save_checkpoint(params: dict, path: str, meta: dict | None = None) -> None:
    """Write ``params`` (name -> array) atomically to ``path``."""
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        a = _le(np.asarray(params[name]))
        code = a.dtype.str
        if code not in _DTYPES:
            raise InvalidArgument(f"array {name!r}: unsupported dtype {a.dtype}")
        raw = a.tobytes(order="C")
        entries.append({"name": name, "shape": list(a.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "payload_bytes": offset, "meta": meta or {}}, sort_keys=True).encode()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_manifest(path: str) -> tuple[dict, int]:
    """Parsed manifest and the payload start offset."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: file too short for a checkpoint header")
        magic, version, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint format version {version} is not supported (expected {VERSION})")
        body = fh.read(mlen)
    if len(body) != mlen:
        raise FormatError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(body.decode("utf-8"))
        manifest["arrays"], manifest["payload_bytes"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from exc
    return manifest, _HEADER.size + mlen


def load_checkpoint(path: str, with_meta: bool = False):
    """Read a checkpoint. Returns ``params`` or ``(params, meta)``.

    Raises FormatError on any inconsistency; nothing is returned partially.
    """
    manifest, start = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    total = manifest["payload_bytes"]
    if len(payload) != total:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest declares {total} (truncated or padded)")
    params, cursor = {}, 0
    for e in manifest["arrays"]:
        try:
            name, shape, code, off, nbytes = e["name"], e["shape"], e["dtype"], e["offset"], e["nbytes"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed manifest entry {e!r}") from exc
        if code not in _DTYPES:
            raise FormatError(f"{path}: array {name!r} has unsupported dtype {code!r}")
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise FormatError(f"{path}: array {name!r} has invalid shape {shape!r}")
        dt = np.dtype(code)
        expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if expect != nbytes:
            raise FormatError(f"{path}: array {name!r} shape {tuple(shape)} needs {expect} bytes, manifest says {nbytes}")
        if off != cursor or off + nbytes > total:
            raise FormatError(f"{path}: array {name!r} offset {off} is inconsistent with the payload layout")
        params[name] = np.frombuffer(payload, dtype=dt, count=expect // dt.itemsize, offset=off).reshape(shape).copy()
        cursor = off + nbytes
    if cursor != total:
        raise FormatError(f"{path}: {total - cursor} payload bytes are not covered by the manifest")
    meta = manifest.get("meta", {})
    return (params, meta) if with_meta else params
