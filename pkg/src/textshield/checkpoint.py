"""Versioned binary parameter files.

Layout (all integers little-endian)::

    b"TSCK"                      magic
    uint16                       format version
    uint32                       header length n
    n bytes                      UTF-8 JSON header, keys sorted:
                                 {"kind": str, "meta": {...},
                                  "params": [{"name": str, "shape": [int, ...]}, ...]}
    for each header param, in order:
        prod(shape) * 8 bytes    float64 little-endian, row-major

Saving the same content twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"TSCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def dumps(kind: str, meta: dict, params: Dict[str, np.ndarray]) -> bytes:
    header = {
        "kind": kind,
        "meta": meta,
        "params": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    for v in params.values():
        chunks.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes, expected_kind: Optional[str] = None) -> Tuple[str, dict, Dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError("file shorter than header prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointTruncatedError("header truncated")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointVersionError(f"unreadable header: {exc}") from None
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(f"checkpoint holds {header.get('kind')!r}, expected {expected_kind!r}")
    offset = start + hlen
    params: Dict[str, np.ndarray] = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if len(blob) < offset + nbytes:
            raise CheckpointTruncatedError(f"parameter {spec['name']!r} truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64)
        params[spec["name"]] = arr.reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after parameters")
    return header["kind"], header["meta"], params


def save(path, kind: str, meta: dict, params: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(kind, meta, params))


def load(path, expected_kind: Optional[str] = None):
    with open(path, "rb") as fh:
        return loads(fh.read(), expected_kind)


def check_shapes(params: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> None:
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointShapeError(f"parameter names differ: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointShapeError(f"{name}: stored shape {params[name].shape}, expected {tuple(shape)}")
