"""Checkpoint container shared by every stage.

Layout::

    UVLM-CKPT
    format_version: 1
    module: <provenance tag, e.g. stage1>
    config: <single-line canonical JSON>
    tensors: <count>
    <blank line>
    then per tensor: "<name> <dtype> <d0,d1,...> <nbytes>\\n" followed by the
    little-endian C-order payload.

Saving the same tensors and config always yields the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = "UVLM-CKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class StageCheckpoint:
    module: str
    config: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        header = [
            MAGIC,
            f"format_version: {FORMAT_VERSION}",
            f"module: {self.module}",
            "config: " + json.dumps(self.config, sort_keys=True, separators=(",", ":")),
            f"tensors: {len(self.tensors)}",
            "",
        ]
        chunks = ["\n".join(header).encode() + b"\n"]
        for name, t in self.tensors.items():
            if " " in name:
                raise CheckpointError(f"tensor name may not contain spaces: {name!r}")
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            payload = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
            shape = ",".join(str(s) for s in t.shape)
            chunks.append(f"{name} {_DTYPES[t.dtype]} {shape} {len(payload)}\n".encode())
            chunks.append(payload)
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StageCheckpoint":
        try:
            return cls._parse(blob)
        except CheckpointError:
            raise
        except (ValueError, IndexError, TypeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc

    @classmethod
    def _parse(cls, blob: bytes) -> "StageCheckpoint":
        pos = 0

        def line():
            nonlocal pos
            end = blob.index(b"\n", pos)
            out = blob[pos:end].decode()
            pos = end + 1
            return out

        if line() != MAGIC:
            raise CheckpointError("not a checkpoint container")
        version = int(line().split(": ", 1)[1])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        module = line().split(": ", 1)[1]
        config = json.loads(line().split(": ", 1)[1])
        count = int(line().split(": ", 1)[1])
        if line() != "":
            raise CheckpointError("malformed header")
        tensors = {}
        for _ in range(count):
            name, dtype, shape, nbytes = line().split(" ")
            nbytes = int(nbytes)
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated payload for {name}")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            arr = np.frombuffer(blob[pos : pos + nbytes], dtype=np.dtype(dtype)).reshape(dims)
            pos += nbytes
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        return cls(module, config, tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "StageCheckpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
