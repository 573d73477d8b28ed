"""Versioned binary container for named tensors plus a JSON header.

Shared by checkpoint, adapter, token-embedding, and feature files. The layout
is deterministic (no timestamps, sorted tensor order), so identical contents
produce identical bytes:

    magic     8 bytes  b"BUSAUGTF":
    version   4 bytes  little-endian uint32
    hdr_len   8 bytes  little-endian uint64
    header    hdr_len bytes of canonical JSON (kind, meta, tensor index)
    data      concatenated C-order little-endian tensor buffers
"""

from __future__ import annotations

from pathlib import Path

import json

import numpy as np

from .util import canonical_json

MAGIC = b"BUSAUGTF"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class TensorFileError(ValueError):
    """Malformed or incompatible tensor container."""


def write_tensors(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named float tensors with a JSON header to ``path``."""
    index = []
    buffers = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPES:
            raise TensorFileError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.astype(_DTYPES[arr.dtype.name]).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        buffers.append(raw)
        offset += len(raw)
    header = canonical_json({"kind": kind, "meta": meta, "tensors": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def read_tensors(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns ``(meta, tensors)``.

    ``meta`` carries the header's ``meta`` field. Raises TensorFileError on a
    bad magic, unknown version, or mismatched ``expect_kind``.
    """
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise TensorFileError(f"{path}: not a busaug tensor container")
    version = int.from_bytes(blob[8:12], "little")
    if version != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported container version {version}")
    hdr_len = int.from_bytes(blob[12:20], "little")
    header = json.loads(blob[20 : 20 + hdr_len].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise TensorFileError(
            f"{path}: container kind {header['kind']!r}, expected {expect_kind!r}"
        )
    base = 20 + hdr_len
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], tensors
