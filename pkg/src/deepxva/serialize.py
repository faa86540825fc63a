"""Versioned binary container for model files and path dumps.

Layout: magic bytes, u32 format version, u32 header length, UTF-8 JSON
header, then the raw little-endian float64 arrays in the order declared by
``header["arrays"]`` (a list of ``{"name": ..., "shape": [...]}``).
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"XVAC"
VERSION = 1


class ContainerError(Exception):
    pass


def save_container(path: str, header: dict, arrays: list[np.ndarray]) -> None:
    names = header.get("arrays")
    if names is None:
        header = dict(header)
        header["arrays"] = [{"name": f"a{i}", "shape": list(a.shape)} for i, a in enumerate(arrays)]
    else:
        if len(names) != len(arrays):
            raise ContainerError("header declares a different number of arrays")
        for decl, a in zip(names, arrays):
            decl["shape"] = list(a.shape)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(blob)))
            f.write(blob)
            for a in arrays:
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_container(path: str) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = []
        for decl in header["arrays"]:
            shape = tuple(decl["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ContainerError(f"{path}: truncated array {decl.get('name')}")
            arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    return header, arrays
