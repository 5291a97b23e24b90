"""Versioned single-file array container.

Layout::

    b"RVGC"  | u32 format version | u64 header length | JSON header | payload

The header carries free-form metadata, an index of the stored arrays
(name, dtype, shape, byte offset, byte length) and a SHA-256 of the payload.
Writing is byte-deterministic: identical inputs give identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RVGC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(Exception):
    """Raised for unreadable, corrupt or incompatible container files."""


class ContainerVersionError(ContainerError):
    pass


def write_container(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes 0-d arrays to 1-d
        arr = np.asarray(arrays[name])
        if arr.dtype == object:
            raise ContainerError(f"array {name!r} has object dtype")
        raw = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "meta": dict(meta or {}),
        "index": index,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_prefix_and_header(fh)
    return header


def _read_prefix_and_header(fh):
    prefix = fh.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise ContainerError("file too short for a container header")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise ContainerError("not a container file (bad magic)")
    if version != FORMAT_VERSION:
        raise ContainerVersionError(f"container format version {version}, expected {FORMAT_VERSION}")
    hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(hbytes)
    except json.JSONDecodeError as exc:
        raise ContainerError(f"corrupt container header: {exc}") from exc
    return header, _PREFIX.size + hlen


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; verifies the payload checksum."""
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"no such container: {path}")
    with open(path, "rb") as fh:
        header, _ = _read_prefix_and_header(fh)
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ContainerError(f"checksum mismatch in {path} (corrupt payload)")
    arrays = {}
    for entry in header["index"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]
