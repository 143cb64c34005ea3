# controldino/services/tensorfile.py
"""CDKT binary tensor files.

Layout: 8-byte magic ``CDKT0001``, little-endian u32 header length, a JSON header
``{"dtype": "f32", "shape": [...], "order": "row_major"}``, then raw
little-endian float32 data. Round trips are bit-exact.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError

MAGIC = b"CDKT0001"
_PREFIX = len(MAGIC) + 4


def encode_tensor(value) -> bytes:
    arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape), "order": "row_major"}).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes()


def _parse_header(buf: bytes):
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not a CDKT tensor file", offset=0)
    if len(buf) < _PREFIX:
        raise FormatError("truncated header length", offset=len(MAGIC))
    (header_len,) = struct.unpack("<I", buf[len(MAGIC):_PREFIX])
    end = _PREFIX + header_len
    if len(buf) < end:
        raise FormatError(f"truncated header: need {header_len} bytes, have {len(buf) - _PREFIX}", offset=_PREFIX)
    try:
        header = json.loads(buf[_PREFIX:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", offset=_PREFIX) from e

    if not isinstance(header, dict) or header.get("dtype") != "f32" or header.get("order") != "row_major":
        raise FormatError(f"unsupported header {header!r}", offset=_PREFIX)
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise FormatError(f"invalid shape {shape!r}", offset=_PREFIX)
    return tuple(shape), end


def decode_tensor(buf: bytes) -> np.ndarray:
    shape, start = _parse_header(buf)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    found = len(buf) - start
    if found != expected:
        raise FormatError(f"expected {expected} bytes of float32 data for shape {list(shape)}, found {found}",
                          offset=start)
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(shape).astype(np.float32)


def read_header(path) -> tuple:
    """Shape stored in a tensor file, without reading its data."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX)
        if len(prefix) == _PREFIX and prefix[: len(MAGIC)] == MAGIC:
            (header_len,) = struct.unpack("<I", prefix[len(MAGIC):])
            prefix += fh.read(header_len)
    shape, _ = _parse_header(prefix)
    return shape


def read_tensor(path) -> torch.Tensor:
    return torch.from_numpy(decode_tensor(Path(path).read_bytes()))


def write_tensor(path, value) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(value))
    os.replace(tmp, path)
