"""Binary snapshot of a distilled support set.

Layout (all integers little-endian u32):

    "KIPD" | version | n_s | d | C | flags
    X_s   n_s*d float64 LE, row-major
    y_s   n_s*C float64 LE, row-major
    mask  ceil(n_s*d / 8) bytes of packed bits, row-major, LSB first (flags bit 0)
    meta  u32 byte length, then UTF-8 JSON

flags bit 0: a corruption mask is present; bit 1: labels were learned.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from kipd.datasets import CorruptionMask
from kipd.errors import FormatError
from kipd.kip import SupportSet

MAGIC = b"KIPD"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
FLAG_MASK = 1
FLAG_LEARNED_LABELS = 2


@dataclass
class Snapshot:
    X: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None
    labels_learned: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_support(cls, support: SupportSet, **meta) -> "Snapshot":
        mask = None
        if support.mask is not None:
            mask = support.mask.frozen
            meta.setdefault("rho", support.mask.rho)
            meta.setdefault("corruption_scheme", support.mask.scheme)
        return cls(support.X, support.y, mask, support.learn_labels, meta)

    def to_support(self) -> SupportSet:
        mask = None
        if self.mask is not None:
            mask = CorruptionMask(self.mask, float(self.meta.get("rho", 0.0)),
                                  str(self.meta.get("corruption_scheme", "uniform")))
        return SupportSet(self.X, self.y, mask, self.labels_learned)


def dumps(snap: Snapshot) -> bytes:
    X = np.ascontiguousarray(snap.X, dtype="<f8")
    y = np.ascontiguousarray(snap.y, dtype="<f8")
    if X.ndim != 2 or y.ndim != 2 or len(X) != len(y):
        raise ValueError("snapshot needs X (n_s x d) and y (n_s x C) with matching rows")
    n_s, d = X.shape
    flags = FLAG_LEARNED_LABELS if snap.labels_learned else 0
    parts = [None, X.tobytes(), y.tobytes()]
    if snap.mask is not None:
        mask = np.asarray(snap.mask, dtype=bool)
        if mask.shape != X.shape:
            raise ValueError("mask shape differs from X")
        flags |= FLAG_MASK
        parts.append(np.packbits(mask.ravel(), bitorder="little").tobytes())
    meta = json.dumps(snap.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts[0] = HEADER.pack(MAGIC, VERSION, n_s, d, y.shape[1], flags)
    return b"".join(parts)


def loads(raw: bytes) -> Snapshot:
    if len(raw) < HEADER.size:
        raise FormatError("snapshot shorter than its header")
    magic, version, n_s, d, C, flags = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    if flags & ~(FLAG_MASK | FLAG_LEARNED_LABELS):
        raise FormatError(f"unknown snapshot flags 0x{flags:x}")
    pos = HEADER.size
    sizes = [8 * n_s * d, 8 * n_s * C]
    if flags & FLAG_MASK:
        sizes.append((n_s * d + 7) // 8)
    if len(raw) < pos + sum(sizes) + 4:
        raise FormatError("snapshot payload is truncated")
    X = np.frombuffer(raw, "<f8", n_s * d, pos).reshape(n_s, d).astype(np.float64)
    pos += sizes[0]
    y = np.frombuffer(raw, "<f8", n_s * C, pos).reshape(n_s, C).astype(np.float64)
    pos += sizes[1]
    mask = None
    if flags & FLAG_MASK:
        bits = np.frombuffer(raw, np.uint8, sizes[2], pos)
        mask = np.unpackbits(bits, count=n_s * d, bitorder="little").astype(bool).reshape(n_s, d)
        pos += sizes[2]
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) != pos + meta_len:
        raise FormatError(f"snapshot length {len(raw)} does not match header "
                          f"(expected {pos + meta_len})")
    try:
        meta = json.loads(raw[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad snapshot metadata: {exc}") from exc
    return Snapshot(X, y, mask, bool(flags & FLAG_LEARNED_LABELS), meta)


def save(path, snap: Snapshot) -> None:
    with open(path, "wb") as f:
        f.write(dumps(snap))


def load(path) -> Snapshot:
    with open(path, "rb") as f:
        return loads(f.read())
