"""SEGT tensor file format.

Line 1 is a UTF-8 JSON header ``{"magic":"SEGT1","dtype":...,"shape":[...]}``
terminated by a newline, followed immediately by the raw little-endian,
row-major payload.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = "SEGT1"

_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}
_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64", np.dtype("u1"): "u8"}


class SegtError(ValueError):
    """Raised for malformed SEGT files or unsupported dtypes."""


def dtype_name(arr: np.ndarray) -> str:
    try:
        return _NAMES[arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype]
    except KeyError:
        raise SegtError(f"unsupported dtype {arr.dtype}; SEGT supports f32, f64, u8") from None


def write(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write ``arr`` atomically (temp file + rename)."""
    arr = np.ascontiguousarray(arr)
    name = dtype_name(arr)
    header = json.dumps(
        {"magic": MAGIC, "dtype": name, "shape": list(arr.shape)}, separators=(",", ":")
    )
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header.encode("utf-8"))
            f.write(b"\n")
            f.write(arr.astype(_DTYPES[name], copy=False).tobytes(order="C"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SegtError(f"{path}: bad SEGT header: {exc}") from None
        if header.get("magic") != MAGIC:
            raise SegtError(f"{path}: magic {header.get('magic')!r} != {MAGIC!r}")
        name = header.get("dtype")
        if name not in _DTYPES:
            raise SegtError(f"{path}: unknown dtype {name!r}")
        shape = header.get("shape")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and d > 0 for d in shape
        ):
            raise SegtError(f"{path}: bad shape {shape!r}")
        count = int(np.prod(shape))
        data = f.read()
    arr = np.frombuffer(data, dtype=_DTYPES[name], count=-1)
    if arr.size != count:
        raise SegtError(f"{path}: payload has {arr.size} values, header implies {count}")
    return arr.reshape(shape).copy()
