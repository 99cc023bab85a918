"""Binary weight checkpoints.

Layout (all integers little-endian)::

    b"EYOLOCKP"                 8-byte magic
    u32 version
    u32 hash_len, hash bytes    network config hash (hex, ascii)
    u32 n_arrays
    n_arrays x:
        u32 name_len, name      utf-8
        u32 rank, rank x u64    dims
        f64[prod(dims)]         C-order payload

Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

MAGIC = b"EYOLOCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], arrays: Mapping[str, np.ndarray], config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        hb = config_hash.encode("ascii")
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    tmp.replace(path)
    return path


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(
    path: Union[str, Path], expected_hash: Optional[str] = None
) -> Tuple[Dict[str, np.ndarray], str]:
    """Read a checkpoint; returns ``(arrays, config_hash)``.

    With ``expected_hash`` set, a checkpoint written for a different network
    config is rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not an eyolo checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read(fh, 4))
        config_hash = _read(fh, hlen).decode("ascii")
        (count,) = struct.unpack("<I", _read(fh, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arrays[name] = np.frombuffer(_read(fh, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last array")
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"{path}: checkpoint was written for config {config_hash[:12]}, network config is {expected_hash[:12]}"
        )
    return arrays, config_hash
