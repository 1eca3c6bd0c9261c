"""Reader and writer for the safetensors named-tensor container.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor names to ``{"dtype", "shape", "data_offsets"}`` (offsets relative to
the end of the header), then the raw little-endian tensor bytes. An optional
``__metadata__`` entry holds string-to-string metadata.

All floating dtypes are widened to float32 on read; BF16 is expanded by bit
shifting so no torch dependency is needed.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, LoadError

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
_NAMES = {v: k for k, v in _DTYPES.items() if k != "BF16"}

# Refuse absurd headers before allocating.
MAX_HEADER_BYTES = 100 * 1024 * 1024


def _parse_header(buf: bytes, path) -> tuple[dict, dict, int]:
    if len(buf) < 8:
        raise FormatError(f"{path}: file too short for a safetensors header")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > MAX_HEADER_BYTES or 8 + n > len(buf):
        raise FormatError(f"{path}: header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid UTF-8 JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    metadata = header.pop("__metadata__", None) or {}
    return header, metadata, 8 + n


def read_safetensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Return ``(tensors, metadata)``. Floating tensors come back as float32."""
    path = Path(path)
    buf = path.read_bytes()
    header, metadata, start = _parse_header(buf, path)
    data_len = len(buf) - start
    tensors = {}
    for name, info in header.items():
        try:
            dtype_name = info["dtype"]
            shape = [int(s) for s in info["shape"]]
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed header entry for {name!r}") from None
        if dtype_name not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {dtype_name!r} for {name!r}")
        dtype = _DTYPES[dtype_name]
        count = int(np.prod(shape, dtype=np.int64))
        if not 0 <= begin <= end <= data_len or end - begin != count * dtype.itemsize:
            raise FormatError(f"{path}: byte range [{begin}, {end}) invalid for {name!r} {dtype_name}{shape}")
        raw = np.frombuffer(buf, dtype=dtype, count=count, offset=start + begin).reshape(shape)
        if dtype_name == "BF16":
            arr = (raw.astype(np.uint32) << 16).view(np.float32)
        elif dtype.kind == "f":
            arr = raw.astype(np.float32)
        else:
            arr = raw.copy()
        arr.setflags(write=False)
        tensors[name] = arr
    return tensors, dict(metadata)


def write_safetensors(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    """Write atomically: the file appears complete or not at all."""
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dtype not in _NAMES:
            raise LoadError(f"cannot serialize {name!r} with dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        header[name] = {"dtype": _NAMES[dtype], "shape": list(arr.shape), "data_offsets": [offset, offset + len(data)]}
        chunks.append(data)
        offset += len(data)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".safetensors")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
