"""Binary checkpoints.

Layout::

    b"RCPK" | u32 version | u32 header length | JSON header | payloads

All integers are little-endian.  The header holds the graph description and a
tensor index (name, shape, byte count, CRC-32); payloads are little-endian
float32 in index order.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .graph import ModelGraph, from_description
from .nn import Network

MAGIC = b"RCPK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Network, path, extra=None):
    tensors = []
    payloads = []
    for name, arr in net.state().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "nbytes": len(data), "crc32": zlib.crc32(data)})
        payloads.append(data)
    header = json.dumps({"graph": net.graph.describe(), "tensors": tensors, "extra": extra or {}}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def read_checkpoint(path):
    """Returns (graph, state dict, extra)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (reader is {VERSION})")
    if len(buf) < 12 + hlen:
        raise CheckpointError(f"{path}: header claims {hlen} bytes, file has {len(buf) - 12}")
    try:
        header = json.loads(buf[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    graph = from_description(header["graph"])
    state = {}
    offset = 12 + hlen
    for t in header["tensors"]:
        n = t["nbytes"]
        expected = 4 * int(np.prod(t["shape"], dtype=np.int64))
        if n != expected:
            raise CheckpointError(f"{path}: tensor '{t['name']}' records {n} bytes, shape needs {expected}")
        chunk = buf[offset:offset + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: payload truncated in tensor '{t['name']}' at offset {offset}")
        if zlib.crc32(chunk) != t["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in tensor '{t['name']}' (offset {offset})")
        state[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).astype(np.float32)
        offset += n
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes after the last tensor")
    return graph, state, header.get("extra", {})


def load_checkpoint(path, expected_graph: ModelGraph | None = None) -> Network:
    graph, state, _ = read_checkpoint(path)
    if expected_graph is not None and graph.fingerprint() != expected_graph.fingerprint():
        raise CheckpointError(f"{path}: checkpoint holds graph '{graph.name}', expected '{expected_graph.name}'")
    return Network.from_state(graph, state, dtype=np.float32)
