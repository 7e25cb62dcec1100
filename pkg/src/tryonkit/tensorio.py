"""Raw tensor files (``TTF1``) and parameter checkpoints.

Layout of a tensor file: magic ``b"TTF1"``, little-endian ``u32`` rank,
``rank`` little-endian ``u32`` extents, then the ``float32`` payload in
row-major order. A checkpoint is a directory holding ``manifest.json``
(UTF-8, maps parameter name to tensor file) and one tensor file per entry.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .numerics import DTYPE, ParamStore, Tensor

MAGIC = b"TTF1"
CHECKPOINT_SCHEMA = 1

# mkstemp creates 0600 files; published outputs follow the process umask instead
_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_to_bytes(t: Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    if not np.isfinite(arr).all():
        raise ValueError("tensor has values that are not finite in float32")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(data: bytes) -> Tensor:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ValueError("not a TTF1 tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", data, 4)
    off = 8 + 4 * rank
    if len(data) < off:
        raise ValueError("truncated TTF1 header")
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    if any(s == 0 for s in shape):
        raise ValueError(f"TTF1 extents must be positive, got {shape}")
    count = int(np.prod(shape)) if rank else 1
    if len(data) != off + 4 * count:
        raise ValueError(f"TTF1 payload has {len(data) - off} bytes, expected {4 * count}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
    if not np.isfinite(arr).all():
        raise ValueError("TTF1 payload contains non-finite values")
    return torch.from_numpy(arr.astype(np.float64))


def write_tensor(path: str | os.PathLike, t: Tensor) -> None:
    atomic_write_bytes(path, tensor_to_bytes(t))


def read_tensor(path: str | os.PathLike) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())


def _file_name(name: str) -> str:
    return name.replace("/", "_") + ".ttf"


def save_checkpoint(directory: str | os.PathLike, params: ParamStore) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": CHECKPOINT_SCHEMA, "tensors": {}}
    for name in sorted(params):
        fname = _file_name(name)
        write_tensor(directory / fname, params[name])
        manifest["tensors"][name] = fname
    atomic_write_bytes(
        directory / "manifest.json",
        json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"),
    )


def load_checkpoint(directory: str | os.PathLike) -> ParamStore:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    return ParamStore(
        {name: read_tensor(directory / fname).to(DTYPE) for name, fname in manifest["tensors"].items()}
    )
