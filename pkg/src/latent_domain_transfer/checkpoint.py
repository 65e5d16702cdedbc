"""
Module for reading and writing model checkpoints.

Binary layout (all integers little-endian u32):
  magic "LBCK" | format version | entry count |
  per entry: name length, UTF-8 name, rank, extents..., payload
The payload is little-endian float32 in row-major order. Batchnorm running
statistics are stored as ordinary entries.
"""

import hashlib
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from src.latent_domain_transfer.exceptions import FormatError, MissingPrerequisiteError
from src.latent_domain_transfer.layers import Module

logger = logging.getLogger(__name__)

MAGIC = b"LBCK"
FORMAT_VERSION = 1


def serialize_state(state: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name, value in state.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def deserialize_state(payload: bytes) -> "OrderedDict[str, np.ndarray]":
    """
    Parse checkpoint bytes into an ordered name -> float32 array mapping.

    Raises:
        FormatError: On a wrong magic, unsupported version or truncated data.
    """
    if payload[:4] != MAGIC:
        raise FormatError(f"Not a checkpoint: magic {payload[:4]!r}")
    offset = 4

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise FormatError("Truncated checkpoint")
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")

    state = OrderedDict()
    for _ in range(count):
        (name_length,) = struct.unpack("<I", take(4))
        name = take(name_length).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after the last entry")
    return state


def state_digest(state: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(serialize_state(state)).hexdigest()


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_module(module: Module, path: Union[str, Path], prefix: str) -> Path:
    """
    Write a module's parameters and buffers with names prefixed ``prefix.``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = OrderedDict((f"{prefix}.{name}", value) for name, value in module.state_dict().items())
    path.write_bytes(serialize_state(state))
    logger.info(f"Saved checkpoint {path} ({len(state)} entries)")
    return path


def load_module(module: Module, path: Union[str, Path], prefix: str) -> Module:
    """
    Load a checkpoint written by save_module into ``module``.

    Raises:
        MissingPrerequisiteError: If the file does not exist.
        FormatError: If the file is malformed or has another prefix.
    """
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"Checkpoint not found: {path}")
    state = deserialize_state(path.read_bytes())
    marker = f"{prefix}."
    if any(not name.startswith(marker) for name in state):
        raise FormatError(f"{path} does not hold a '{prefix}' checkpoint")
    module.load_state_dict(OrderedDict((name[len(marker):], value) for name, value in state.items()))
    logger.debug(f"Loaded checkpoint {path}")
    return module
