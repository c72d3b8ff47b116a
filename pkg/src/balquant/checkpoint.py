"""Checkpoint and inference-file container.

Layout::

    b"BQNT" | u32 schema version | u64 manifest length | manifest JSON | payloads

All integers little-endian. The manifest lists every payload with its name,
dtype (``<f8`` reals, ``|u1`` codes, ``<i8`` thresholds), shape and byte
offset into the payload area. JSON is written with sorted keys so identical
contents always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BQNT"
SCHEMA_VERSION = 1
_DTYPES = {"<f8", "|u1", "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    manifest: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else "|u1"
            if dtype not in _DTYPES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            data = np.ascontiguousarray(arr.astype(dtype)).tobytes()
            entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        manifest = dict(self.manifest, schema_version=SCHEMA_VERSION, tensors=entries)
        text = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
        return MAGIC + struct.pack("<IQ", SCHEMA_VERSION, len(text)) + text + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Container":
        if raw[:4] != MAGIC:
            raise CheckpointError("not a balquant file (bad magic)")
        version, length = struct.unpack("<IQ", raw[4:16])
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"unsupported schema version {version}")
        manifest = json.loads(raw[16:16 + length].decode("utf-8"))
        body = raw[16 + length:]
        tensors = {}
        for e in manifest.pop("tensors"):
            chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
            if len(chunk) != e["nbytes"]:
                raise CheckpointError(f"truncated payload for {e['name']!r}")
            tensors[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).copy()
        manifest.pop("schema_version", None)
        return cls(manifest, tensors)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Container":
        return cls.from_bytes(Path(path).read_bytes())
