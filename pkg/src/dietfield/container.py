"""Tensor container files: magic, version, JSON header, raw float32 payload.

Layout (little-endian)::

    4 bytes   magic
    u32       version
    u64       header length in bytes
    ...       UTF-8 JSON header; ``header["tensors"]`` is the ordered
              directory [{"name", "shape", "offset"}], offsets in bytes from
              the start of the payload
    ...       payload: each tensor as contiguous row-major float32
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

_PREFIX = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, version: int, header: dict,
                    tensors: Mapping[str, np.ndarray]) -> None:
    directory, blobs, offset = [], [], 0
    for name, value in tensors.items():
        blob = np.ascontiguousarray(value, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(value)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    head = dump_header({**header, "tensors": directory})
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic: bytes, versions=(1,)) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: cannot read ({exc.strerror})") from exc
    if len(raw) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated prefix")
    got_magic, version, head_len = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise ContainerError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version not in versions:
        raise ContainerError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + head_len
    if start > len(raw):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from exc
    payload = memoryview(raw)[start:]
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = entry["offset"]
        hi = lo + 4 * count
        if lo < 0 or hi > len(payload):
            raise ContainerError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return header, tensors
