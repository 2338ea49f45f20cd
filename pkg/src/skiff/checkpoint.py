"""Binary weight snapshots with CRC integrity and embedded config text.

Layout: magic, u32 entry count, then per entry a u16 name length, the
utf-8 name, a u8 dtype code, a u8 rank, u32 dims, and raw little-endian
array bytes. A u32 CRC32 of everything before it closes the file.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"AVRN1"
CONFIG_KEY = "__config__"

_DTYPE_TO_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_CODE_TO_DTYPE = {0: np.dtype(np.float64), 1: np.dtype(np.float32), 2: np.dtype(np.uint8)}


class CheckpointError(Exception):
    pass


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype not in _DTYPE_TO_CODE:
        raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"entry name too long ({len(raw)} bytes)")
    if arr.ndim > 0xFF:
        raise CheckpointError(f"entry {name!r}: rank {arr.ndim} too large")
    parts = [struct.pack("<H", len(raw)), raw,
             struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape)]
    parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_checkpoint(path: str, arrays: dict, config_text: str | None = None) -> None:
    """Write named arrays in dict order; config text rides along as a u8 entry."""
    items = list(arrays.items())
    if config_text is not None:
        items.insert(0, (CONFIG_KEY, np.frombuffer(
            config_text.encode("utf-8"), dtype=np.uint8).copy()))
    body = [MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        body.append(_pack_entry(name, np.asarray(arr)))
    payload = b"".join(body)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    payload, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupted")
    (count,) = struct.unpack_from("<I", payload, len(MAGIC))
    pos = len(MAGIC) + 4
    out: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", payload, pos)
        pos += 2
        if code not in _CODE_TO_DTYPE:
            raise CheckpointError(f"{path}: entry {name!r} has unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", payload, pos)
        pos += 4 * rank
        dtype = _CODE_TO_DTYPE[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if pos + nbytes > len(payload):
            raise CheckpointError(f"{path}: entry {name!r} is truncated")
        arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"),
                            count=max(1, nbytes // dtype.itemsize) if nbytes else 0,
                            offset=pos)
        out[name] = arr.reshape(dims).astype(dtype, copy=True)
        pos += nbytes
    if pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - pos} trailing bytes after last entry")
    return out


def config_text(arrays: dict) -> str | None:
    if CONFIG_KEY not in arrays:
        return None
    return arrays[CONFIG_KEY].tobytes().decode("utf-8")


def save_model(path: str, model, config_str: str | None = None) -> None:
    arrays = {name: t.data for name, t in model.named_parameters()}
    save_checkpoint(path, arrays, config_text=config_str)


def load_into(model, arrays: dict) -> None:
    """Copy arrays into model parameters by name; any mismatch reports all of them."""
    params = dict(model.named_parameters())
    weights = {k: v for k, v in arrays.items() if k != CONFIG_KEY}
    problems = []
    for name in sorted(set(params) - set(weights)):
        problems.append(f"missing from checkpoint: {name}")
    for name in sorted(set(weights) - set(params)):
        problems.append(f"unexpected in checkpoint: {name}")
    for name in sorted(set(params) & set(weights)):
        if params[name].data.shape != weights[name].shape:
            problems.append(f"shape mismatch for {name}: model "
                            f"{params[name].data.shape} vs file {weights[name].shape}")
    if problems:
        raise CheckpointError("checkpoint does not fit model:\n  " + "\n  ".join(problems))
    for name, tensor in params.items():
        tensor.data[...] = weights[name].astype(np.float64)


def model_from_checkpoint(path: str):
    """Rebuild the model recorded in a checkpoint and load its weights."""
    from .config import model_config_from_text
    from .model import build_model

    arrays = load_checkpoint(path)
    text = config_text(arrays)
    if text is None:
        raise CheckpointError(f"{path}: no embedded config, cannot rebuild the model")
    model = build_model(model_config_from_text(text))
    load_into(model, arrays)
    return model
