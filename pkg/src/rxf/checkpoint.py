"""Bit-exact binary checkpoint container.

Layout (all little-endian):
    magic  "RXF1"
    u32    format version (currently 1)
    u32    metadata length, then that many bytes of UTF-8 JSON
    tensor table:
        u32  tensor count
        per tensor: u32 name length + UTF-8 name, u8 dtype code
                    (0=float32, 1=float64), u32 rank, i64 dims,
                    raw little-endian values
    u32    CRC32 over the tensor table bytes

Save -> load -> save produces byte-identical files; the loader rebuilds
the network from the architecture descriptor in the metadata and
validates every tensor shape against it.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .layers import Network, build_network

MAGIC = b"RXF1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes()
    return head + dims + payload


def save_checkpoint(net: Network, meta: dict, path: str):
    """Write the network's parameters, BN statistics, and metadata."""
    meta = dict(meta)
    meta.setdefault("arch", net.arch)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = net.state_arrays()
    table = struct.pack("<I", len(tensors))
    for name, arr in tensors:
        table += _pack_tensor(name, arr)
    blob = MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
    blob += table + struct.pack("<I", zlib.crc32(table))
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path: str) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    """Parse the container; returns (metadata, named tensors)."""
    r = _Reader(open(path, "rb").read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    table_start = r.pos
    count = r.u32("tensor count")
    tensors = []
    for _ in range(count):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        code, rank = struct.unpack("<BI", r.take(5, "dtype/rank"))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}q", r.take(8 * rank, "dims"))
        dtype = _DTYPES[code]
        n_items = int(np.prod(dims)) if rank else 1
        payload = r.take(n_items * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        tensors.append((name, arr))
    table = r.buf[table_start : r.pos]
    stored_crc = r.u32("crc32")
    if zlib.crc32(table) != stored_crc:
        raise CheckpointError(f"{path}: CRC32 mismatch; checkpoint corrupted")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return meta, tensors


def load_checkpoint(path: str) -> tuple[Network, dict]:
    """Rebuild the network named in the metadata and restore every tensor."""
    meta, tensors = read_checkpoint(path)
    arch = meta.get("arch")
    if not arch:
        raise CheckpointError(f"{path}: metadata lacks an architecture descriptor")
    net = build_network(arch, seed=0)
    slots = dict(net.state_arrays())
    if set(slots) != {name for name, _ in tensors}:
        missing = set(slots) ^ {name for name, _ in tensors}
        raise CheckpointError(f"{path}: tensor names do not match architecture: {sorted(missing)[:5]}")
    by_layer = {name: layer for name, layer in net.named_layers()}
    for name, arr in tensors:
        if slots[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {arr.shape} != architecture shape {slots[name].shape}"
            )
    _install_tensors(net, dict(tensors))
    return net, meta


def _install_tensors(net: Network, values: dict):
    for bi, block in enumerate(net.blocks):
        for label, layer in block.named_layers():
            prefix = f"b{bi + 1}.{label}"
            for pname, p in layer.params():
                p.data = values[f"{prefix}.{pname}"].astype(p.data.dtype, copy=True)
                p.grad = None
            if hasattr(layer, "running_mean"):
                layer.running_mean = values[f"{prefix}.running_mean"].astype(np.float32, copy=True)
                layer.running_var = values[f"{prefix}.running_var"].astype(np.float32, copy=True)
