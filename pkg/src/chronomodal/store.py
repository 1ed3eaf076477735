"""Binary embedding store: magic "TMEB1", little-endian throughout.

Layout: 5-byte magic, uint32 dimension, uint64 record count, then per
record a uint32 key length, the UTF-8 key bytes, one modality byte
(0 = image, 1 = text), and dimension float32 values. Write-then-read
round-trips byte-identically; readers validate the count and reject
trailing bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, CorruptionError, FormatError

MAGIC = b"TMEB1"
MODALITY_IMAGE = 0
MODALITY_TEXT = 1
HEADER = struct.Struct("<5sIQ")
KEYLEN = struct.Struct("<I")


@dataclass
class EmbeddingStore:
    """In-memory key -> float32 vector map with modality tags."""

    dim: int
    vectors: dict = field(default_factory=dict)      # key -> np.float32 array
    modalities: dict = field(default_factory=dict)   # key -> 0 | 1

    def put(self, key: str, vector, modality: int) -> None:
        if key in self.vectors:
            raise ContractError(f"duplicate embedding key {key!r}")
        if modality not in (MODALITY_IMAGE, MODALITY_TEXT):
            raise ContractError(f"modality must be 0 or 1, got {modality}")
        arr = np.asarray(vector, dtype=np.float32)
        if arr.shape != (self.dim,):
            raise ContractError(f"vector for {key!r} has shape {arr.shape}, "
                                f"expected ({self.dim},)")
        self.vectors[key] = arr
        self.modalities[key] = modality

    def get(self, key: str) -> np.ndarray:
        """Vector as float64 for model math."""
        try:
            return self.vectors[key].astype(np.float64)
        except KeyError:
            raise ContractError(f"embedding key {key!r} not in store") from None

    def __contains__(self, key: str) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def embstore_write(store: EmbeddingStore, path) -> None:
    with open(path, "wb") as handle:
        handle.write(HEADER.pack(MAGIC, store.dim, len(store.vectors)))
        for key, vec in store.vectors.items():
            raw = key.encode("utf-8")
            handle.write(KEYLEN.pack(len(raw)))
            handle.write(raw)
            handle.write(bytes([store.modalities[key]]))
            handle.write(vec.astype("<f4").tobytes())


def embstore_read(path) -> EmbeddingStore:
    with open(path, "rb") as handle:
        data = handle.read()
    if len(data) < HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, dim, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    store = EmbeddingStore(dim=int(dim))
    offset = HEADER.size
    vec_bytes = 4 * dim
    for _ in range(count):
        if offset + KEYLEN.size > len(data):
            raise CorruptionError(f"{path}: truncated key length at offset {offset}")
        (key_len,) = KEYLEN.unpack_from(data, offset)
        offset += KEYLEN.size
        end = offset + key_len + 1 + vec_bytes
        if end > len(data):
            raise CorruptionError(f"{path}: truncated record at offset {offset}")
        key = data[offset:offset + key_len].decode("utf-8")
        offset += key_len
        modality = data[offset]
        offset += 1
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        if key in store.vectors:
            raise FormatError(f"{path}: duplicate key {key!r}")
        if modality not in (MODALITY_IMAGE, MODALITY_TEXT):
            raise FormatError(f"{path}: invalid modality byte {modality} for {key!r}")
        store.vectors[key] = vec
        store.modalities[key] = int(modality)
    if offset != len(data):
        raise CorruptionError(f"{path}: {len(data) - offset} trailing bytes "
                              f"after {count} records")
    return store
