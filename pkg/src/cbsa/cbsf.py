"""CBSF feature files.

Layout (all little-endian)::

    0..3   b"CBSF"
    4      version byte (1)
    5..8   uint32 header length L
    9..    UTF-8 JSON header {"count", "C", "H", "W", "d", "has_labels"}
    then per instance: H*W*d float32 (row-major), then C label bytes in {0, 1}
    when has_labels is true.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"CBSF"
VERSION = 1
_HEADER_KEYS = ("count", "C", "H", "W", "d", "has_labels")


class CBSFFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureDataset:
    features: np.ndarray  # (count, H*W, d) float64 holding float32-exact values
    labels: Optional[np.ndarray]  # (count, C) uint8, or None
    C: int
    H: int
    W: int

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


def encode_features(features: np.ndarray, labels: Optional[np.ndarray], C: int, H: int, W: int) -> bytes:
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[1] != H * W:
        raise ValueError(f"features must be (count, H*W={H * W}, d), got {features.shape}")
    count, _, d = features.shape
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (count, C):
            raise ValueError(f"labels must be ({count}, {C}), got {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
    header = json.dumps(
        {"count": count, "C": C, "H": H, "W": W, "d": d, "has_labels": labels is not None},
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(header)), header]
    f32 = features.astype("<f4")
    lab = labels.astype(np.uint8) if labels is not None else None
    for i in range(count):
        parts.append(f32[i].tobytes())
        if lab is not None:
            parts.append(lab[i].tobytes())
    return b"".join(parts)


def write_features(path: Union[str, Path], features: np.ndarray, labels: Optional[np.ndarray], C: int, H: int, W: int) -> None:
    Path(path).write_bytes(encode_features(features, labels, C, H, W))


def decode_features(buf: bytes) -> FeatureDataset:
    if len(buf) < 9:
        raise CBSFFormatError("file too short for preamble", len(buf))
    if buf[:4] != MAGIC:
        raise CBSFFormatError(f"bad magic {buf[:4]!r}", 0)
    if buf[4] != VERSION:
        raise CBSFFormatError(f"unsupported version {buf[4]}", 4)
    (hlen,) = struct.unpack("<I", buf[5:9])
    if 9 + hlen > len(buf):
        raise CBSFFormatError(f"header length {hlen} runs past end of file", 5)
    try:
        header = json.loads(buf[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CBSFFormatError(f"header is not valid JSON: {exc}", 9) from None
    if not isinstance(header, dict) or set(header) != set(_HEADER_KEYS):
        raise CBSFFormatError(f"header keys must be {sorted(_HEADER_KEYS)}", 9)
    count, C, H, W, d = (header[k] for k in ("count", "C", "H", "W", "d"))
    has_labels = header["has_labels"]
    if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in (count, C, H, W, d)):
        raise CBSFFormatError("header dimensions must be non-negative integers", 9)
    if min(C, H, W, d) < 1 or not isinstance(has_labels, bool):
        raise CBSFFormatError("header shape is inconsistent", 9)
    feat_bytes = H * W * d * 4
    block = feat_bytes + (C if has_labels else 0)
    start = 9 + hlen
    payload = len(buf) - start
    if payload < count * block:
        full = payload // block
        raise CBSFFormatError(f"truncated payload: header declares {count} instances, found {full} complete", start + full * block)
    if payload > count * block:
        raise CBSFFormatError(f"{payload - count * block} trailing bytes after {count} instances", start + count * block)
    raw = np.frombuffer(buf, dtype=np.uint8, count=count * block, offset=start).reshape(count, block)
    features = raw[:, :feat_bytes].copy().view("<f4").reshape(count, H * W, d).astype(np.float64)
    labels = None
    if has_labels:
        labels = raw[:, feat_bytes:].copy()
        bad = np.argwhere(labels > 1)
        if bad.size:
            i, k = bad[0]
            raise CBSFFormatError(f"label byte {labels[i, k]} not in {{0,1}}", start + i * block + feat_bytes + k)
    return FeatureDataset(features, labels, C, H, W)


def ingest_features(path: Union[str, Path]) -> FeatureDataset:
    return decode_features(Path(path).read_bytes())
