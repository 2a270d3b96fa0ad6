"""Binary tensor files, checkpoints and CSV emission.

Tensor record layout (little-endian)::

    b"FERA" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 ndim | ndim x u32 dims | payload

A checkpoint is a concatenation of tensor records plus a text manifest with
one ``name<TAB>shape<TAB>offset`` line per record.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"FERA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    try:
        code = _CODES[arr.dtype]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64") from None
    header = MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, code, ndim = struct.unpack("<IBI", fh.read(9))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` (in insertion order) and the companion manifest."""
    path = Path(path)
    lines = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise FormatError(f"tensor name may not contain whitespace: {name!r}")
            blob = encode_tensor(np.asarray(arr))
            fh.write(blob)
            shape = "x".join(str(d) for d in np.shape(arr)) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}\n")
            offset += len(blob)
    manifest_path(path).write_text("".join(lines), newline="\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for line in manifest_path(path).read_text().splitlines():
            if not line.strip():
                continue
            name, shape, offset = line.split("\t")
            fh.seek(int(offset))
            arr = read_tensor(fh)
            expected = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            if arr.shape != expected:
                raise FormatError(f"{name}: manifest shape {expected} != stored {arr.shape}")
            out[name] = arr
    return out


# -- CSV ---------------------------------------------------------------------

def fmt(v) -> str:
    """Nine significant digits for floats; integers and strings verbatim."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(csv_text(header, rows))
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    text = Path(path).read_text()
    lines = [ln for ln in text.split("\n") if ln]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]
