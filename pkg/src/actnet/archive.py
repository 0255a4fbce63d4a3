"""Flat binary archive: a JSON text header followed by raw little-endian arrays.

Layout::

    ACTNET-ARCHIVE 1\n
    <header byte length>\n
    <utf-8 JSON header>
    <array bytes, concatenated in header order>

The header holds caller metadata under ``meta`` and one entry per array
(``name``, ``dtype``, ``shape``, ``offset``, ``nbytes``).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"ACTNET-ARCHIVE 1\n"


class ArchiveError(IOError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str.replace(">", "<").replace("=", "<"),
             "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "entries": entries}, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, str(len(header)).encode() + b"\n", header, *chunks])


def write_archive(path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> str:
    """Atomically write an archive; returns its sha256 hex digest."""
    payload = encode(meta, arrays)
    atomic_write_bytes(path, payload)
    return hashlib.sha256(payload).hexdigest()


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise ArchiveError(f"{path}: not an actnet archive")
    rest = blob[len(MAGIC):]
    nl = rest.index(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + hlen])
    base = len(MAGIC) + nl + 1 + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ArchiveError(f"{path}: truncated entry {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
