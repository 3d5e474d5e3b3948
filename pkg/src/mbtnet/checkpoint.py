"""Binary parameter containers.

Layout of one section (all integers u32 little-endian)::

    magic[4] version count
    count x (name_len, name utf-8, rank, extents[rank], float32 LE data)

A model checkpoint is an ``MBTC`` section; training checkpoints append an
``MBTO`` section holding the optimizer accumulators under the same names.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

FORMAT_VERSION = 1
MODEL_MAGIC = b"MBTC"
OPTIMIZER_MAGIC = b"MBTO"


class CheckpointError(ValueError):
    pass


def write_section(fh: BinaryIO, magic: bytes, entries: Iterable[tuple[str, np.ndarray]]) -> None:
    entries = list(entries)
    fh.write(magic + struct.pack("<II", FORMAT_VERSION, len(entries)))
    for name, array in entries:
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        fh.write(struct.pack("<I", len(encoded)) + encoded)
        fh.write(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_section(fh: BinaryIO, magic: bytes) -> list[tuple[str, np.ndarray]]:
    found = _read_exact(fh, 4, "magic")
    if found != magic:
        raise CheckpointError(f"bad magic {found!r}, expected {magic!r}")
    version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    entries = []
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
        name = _read_exact(fh, length, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"extents of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        raw = _read_exact(fh, 4 * size, f"data of {name}")
        entries.append((name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()))
    return entries


def atomic_write(path, writer) -> None:
    """Call ``writer(fh)`` on a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_parameters(model, path) -> None:
    atomic_write(path, lambda fh: write_section(
        fh, MODEL_MAGIC, ((p.name, p.data) for p in model.parameters())))


def assign_parameters(model, entries: list[tuple[str, np.ndarray]]) -> None:
    params = {p.name: p for p in model.parameters()}
    stored = dict(entries)
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, "
                              f"unexpected {extra[:5]}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {stored[name].shape} "
                                  f"!= model shape {p.shape}")
        p.data[...] = stored[name]


def load_parameters(model, path) -> None:
    with open(path, "rb") as fh:
        assign_parameters(model, read_section(fh, MODEL_MAGIC))
