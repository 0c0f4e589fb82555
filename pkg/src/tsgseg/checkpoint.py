"""Versioned binary checkpoints.

Layout: the magic string ``TSGCKPT1``, then one record per parameter in
name order: name length (u64 LE), UTF-8 name, rank (u64 LE), one u64 LE per
dimension, then the values as little-endian float32, row-major. Values are
stored at float32 regardless of the training dtype, so a double-precision
model round-trips bit-identically only after its first save/load.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TSGCKPT1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, named_arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(named_arrays):
            # np.ascontiguousarray would widen rank-0 arrays to rank 1
            arr = np.asarray(named_arrays[name], dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"bad magic {magic!r}: not a checkpoint or unsupported version"
            )
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise CheckpointError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, f"rank of {name}"))
            dims = struct.unpack(
                f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of {name}")
            )
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, f"values of {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return out


def save_model(path, model) -> None:
    save_checkpoint(path, {name: p.data for name, p in model.named_parameters()})


def load_model(path, model) -> None:
    """Install checkpoint values into same-named model parameters.

    The file and the model must carry exactly the same parameter names;
    mismatches in either direction are reported by name. Loading casts to
    the model's dtype; nothing is modified if validation fails.
    """
    stored = load_checkpoint(path)
    params = dict(model.named_parameters())
    unknown = sorted(set(stored) - set(params))
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters: {unknown}")
    missing = sorted(set(params) - set(stored))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing}")
    for name, arr in stored.items():
        p = params[name]
        if arr.shape != p.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} vs model {p.shape}"
            )
    for name, arr in stored.items():
        p = params[name]
        p.data = arr.astype(p.data.dtype)
