"""Shared helpers: seed derivation, digests, image conversions."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(root_seed: int, *labels: object) -> int:
    """Derive a child seed from a root seed and a stage path.

    Stable across runs and platforms: hashes the decimal root seed and the
    string form of each label with SHA-256 and keeps 63 bits.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode("utf-8"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def canonical_json(obj: object) -> str:
    """JSON with sorted keys and no whitespace, for digests and headers."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [-1, 1] grayscale image to 8-bit for storage."""
    arr = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def uint8_to_image(arr: np.ndarray, dtype: np.dtype | type = np.float64) -> np.ndarray:
    """Dequantize 8-bit grayscale back to [-1, 1]."""
    return (np.asarray(arr, dtype=np.float64) / 127.5 - 1.0).astype(dtype)


def image_key(image: np.ndarray) -> str:
    """Content identity of an image: SHA-256 of its 8-bit pixel buffer.

    Used to key precomputed feature files; robust to where the file lives.
    """
    q = image_to_uint8(image)
    h = hashlib.sha256()
    h.update(str(q.shape).encode("ascii"))
    h.update(q.tobytes())
    return h.hexdigest()
