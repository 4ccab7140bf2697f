"""Checksummed checkpoint container.

Layout: 8-byte magic, 4-byte little-endian format version, 32-byte SHA-256
of the payload, then the pickled payload (tensors stored as numpy arrays).
Writing the same state twice produces identical bytes, and a load/save
round trip is byte-exact.
"""

from __future__ import annotations

import hashlib
import pickle
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptFile, VersionMismatch

MAGIC = b"VELVETCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI32s")


def _to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {k: _to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [_to_numpy(v) for v in obj]
        return seq if isinstance(obj, list) else {"__tuple__": seq}
    return obj


def _from_numpy(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj and len(obj) == 1:
            return torch.from_numpy(np.ascontiguousarray(obj["__tensor__"])).clone()
        if "__tuple__" in obj and len(obj) == 1:
            return tuple(_from_numpy(v) for v in obj["__tuple__"])
        return {k: _from_numpy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_numpy(v) for v in obj]
    return obj


def save_checkpoint(payload: dict, path) -> None:
    body = pickle.dumps(_to_numpy(payload), protocol=4)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(_HEADER.pack(MAGIC, FORMAT_VERSION, digest) + body)


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size or blob[:8] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    magic, version, digest = _HEADER.unpack(blob[:_HEADER.size])
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body = blob[_HEADER.size:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: payload checksum mismatch")
    return _from_numpy(pickle.loads(body))
