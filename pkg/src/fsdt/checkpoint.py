"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"FSDT"
    version u32
    count   u32
    count records, each:
        kind  u8   0 = tensor, 1 = text
        nlen  u32, name utf-8
        tensor: ndim u32, ndim * u32 dims, ndim-product f64 values
        text:   blen u32, utf-8 payload

Tensor records hold parameters; text records hold metadata such as the
serialized model configuration and vocabulary.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"FSDT"
VERSION = 1

_KIND_TENSOR = 0
_KIND_TEXT = 1


def save_checkpoint(
    path,
    tensors: Mapping[str, "Tensor | np.ndarray"],
    texts: Mapping[str, str] | None = None,
) -> None:
    texts = texts or {}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors) + len(texts)))
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<BI", _KIND_TENSOR, len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())
        for name, text in texts.items():
            encoded = name.encode("utf-8")
            payload = text.encode("utf-8")
            fh.write(struct.pack("<BI", _KIND_TEXT, len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated checkpoint while reading {what} at offset {fh.tell() - len(buf)}: "
            f"expected {n} bytes, got {len(buf)}"
        )
    return buf


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    tensors: dict[str, np.ndarray] = {}
    texts: dict[str, str] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        for i in range(count):
            (kind, nlen) = struct.unpack("<BI", _read_exact(fh, 5, f"record {i} header"))
            name = _read_exact(fh, nlen, f"record {i} name").decode("utf-8")
            if kind == _KIND_TENSOR:
                (ndim,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} ndim"))
                shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"{name} shape"))
                n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
                raw = _read_exact(fh, 8 * n_values, f"{name} data")
                tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            elif kind == _KIND_TEXT:
                (blen,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} length"))
                texts[name] = _read_exact(fh, blen, f"{name} payload").decode("utf-8")
            else:
                raise FormatError(f"unknown record kind {kind} for {name!r}")
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"trailing bytes after {count} records at offset {fh.tell() - 1}")
    return tensors, texts
