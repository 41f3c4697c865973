"""Versioned binary checkpoint for :class:`MpmNetwork`.

Layout (all integers little-endian)::

    magic        4s   b"MPMW"
    version      u16  1
    input_size   u32
    hidden_size  u32
    num_layers   u32
    num_classes  u32
    class names  num_classes x (u16 length, utf-8 bytes)
    num_arrays   u32
    shape table  num_arrays x (u16 name length, name, u8 ndim, ndim x u32)
    data         float64 little-endian, arrays concatenated in table order

Table order is the network's parameter order followed by ``input.mean`` and
``input.scale``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import MpmNetwork

MAGIC = b"MPMW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(net: MpmNetwork, class_names=("Keep", "Come", "Back", "Ring")) -> bytes:
    if len(class_names) != net.num_classes:
        raise CheckpointError("class name count does not match the network")
    arrays = list(net.params.items()) + [("input.mean", net.input_mean), ("input.scale", net.input_scale)]
    out = [MAGIC, struct.pack("<HIIII", VERSION, net.input_size, net.hidden_size, net.num_layers, net.num_classes)]
    for name in class_names:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in arrays:
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def from_bytes(data: bytes) -> tuple[MpmNetwork, tuple[str, ...]]:
    view = memoryview(data)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<H")
        raw = bytes(view[pos:pos + n])
        pos += n
        return raw.decode()

    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an MPM checkpoint (bad magic)")
    pos = 4
    version, d_in, hidden, layers, classes = take("<HIIII")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    names = tuple(take_str() for _ in range(classes))
    (count,) = take("<I")
    table = []
    for _ in range(count):
        name = take_str()
        (ndim,) = take("<B")
        table.append((name, take(f"<{ndim}I")))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape))
        if pos + 8 * n > len(view):
            raise CheckpointError("truncated checkpoint data")
        arrays[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(float).reshape(shape)
        pos += 8 * n
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint data")
    mean = arrays.pop("input.mean")
    scale = arrays.pop("input.scale")
    net = MpmNetwork(d_in, hidden, layers, classes, arrays, mean, scale)
    return net, names


def save(net: MpmNetwork, path, class_names=("Keep", "Come", "Back", "Ring")) -> None:
    Path(path).write_bytes(to_bytes(net, class_names))


def load(path) -> tuple[MpmNetwork, tuple[str, ...]]:
    return from_bytes(Path(path).read_bytes())
