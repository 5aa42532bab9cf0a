"""Binary checkpoint container.

Layout (all integers little-endian): magic ``DITC``, u32 version=1,
u32 tensor count; per tensor: u32 name length, UTF-8 name, u8 dtype
(0 = float32), u8 ndim, ndim x u64 dims, raw little-endian payload.
Tensors are written in sorted name order so equal contents produce
byte-identical files.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DITC"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Atomically write ``tensors`` (written to a temp file, then renamed)."""
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, ndim = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if dtype_code != _DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        tensors[name] = arr.copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors


def save_modules(path: str | Path, modules: dict[str, "object"]) -> None:
    """Write several modules into one file, namespacing tensors as 'name/param'."""
    tensors: dict[str, np.ndarray] = {}
    for ns, module in modules.items():
        for name, value in module.state_dict().items():
            tensors[f"{ns}/{name}"] = value
    save_checkpoint(path, tensors)


def load_namespace(tensors: dict[str, np.ndarray], ns: str) -> dict[str, np.ndarray]:
    prefix = ns + "/"
    sub = {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}
    if not sub:
        raise CheckpointError(f"no tensors under namespace {ns!r}")
    return sub
