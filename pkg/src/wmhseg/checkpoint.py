"""Parameter checkpoints: a self-describing binary container.

Layout: magic "WMHCKPT1", uint32 format version, uint32 JSON length, a
JSON index (network spec + parameter names/shapes/dtypes in payload
order), then the concatenated little-endian C-order parameter payloads.
Writing is byte-deterministic for identical parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .architectures import Network, NetworkSpec

MAGIC = b"WMHCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, network: Network) -> None:
    params = network.parameters()
    le = network.dtype.newbyteorder("<")
    index = {
        "format_version": FORMAT_VERSION,
        "spec": network.spec.to_dict(),
        "dtype": le.str,
        "params": [
            {"name": p.name, "shape": list(p.value.shape), "dtype": le.str}
            for p in params
        ],
    }
    blob = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.value, dtype=le).tobytes())


def load_checkpoint(path: str | Path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"not a checkpoint file: {raw[:8]!r}")
    version, blob_len = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    index = json.loads(raw[16 : 16 + blob_len].decode())
    spec = NetworkSpec.from_dict(index["spec"])
    dtype = np.dtype(index.get("dtype", "<f8"))
    net = Network(spec, seed=0, dtype=dtype.newbyteorder("="))
    offset = 16 + blob_len
    values: dict[str, np.ndarray] = {}
    for entry in index["params"]:
        shape = tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise ValueError(f"truncated checkpoint payload at {entry['name']}")
        values[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    net.load_param_dict(values)
    return net
