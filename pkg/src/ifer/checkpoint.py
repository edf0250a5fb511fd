"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IFERCKPT1"                      magic, 9 bytes
    u32 schema version
    u32 header length, then UTF-8 JSON header
        {"stage", "iteration", "rng_state", "arch", "meta"}
    u32 array count, then per array:
        u16 name length, UTF-8 name, u8 rank, u32 x rank shape,
        float32 little-endian data (C order)
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"IFERCKPT1"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    iteration: int = 0
    arch: dict = field(default_factory=dict)
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for name, t in module.state_dict().items():
            self.arrays[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype("<f4")

    def module_state(self, prefix: str) -> dict:
        start = prefix + "."
        state = {k[len(start):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(start)}
        if not state:
            raise CheckpointError(f"checkpoint ({self.stage}) has no arrays under {prefix!r}")
        return state

    def load_into(self, prefix: str, module: torch.nn.Module) -> None:
        module.load_state_dict(self.module_state(prefix))

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.arrays)

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"stage": self.stage, "iteration": int(self.iteration), "rng_state": self.rng_state,
             "arch": self.arch, "meta": self.meta},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", SCHEMA_VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.arrays)))
        for name, arr in self.arrays.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d scalars to shape (1,)
            arr = np.asarray(arr, dtype="<f4", order="C")
            raw_name = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw_name)))
            buf.write(raw_name)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:len(MAGIC)]) != MAGIC:
            raise CheckpointError("not an IFER checkpoint (bad magic)")
        pos = len(MAGIC)
        version, header_len = struct.unpack_from("<II", view, pos)
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"unsupported checkpoint schema version {version} (expected {SCHEMA_VERSION})")
        pos += 8
        header = json.loads(bytes(view[pos:pos + header_len]).decode("utf-8"))
        pos += header_len
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        arrays = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
            pos += nbytes
        if pos != len(data):
            raise CheckpointError(f"trailing bytes in checkpoint ({len(data) - pos})")
        return cls(stage=header["stage"], iteration=header["iteration"], arch=header["arch"],
                   arrays=arrays, rng_state=header["rng_state"], meta=header["meta"])

    @classmethod
    def load(cls, path, expected_arch: dict | None = None, stages=None) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        ckpt = cls.from_bytes(path.read_bytes())
        if stages is not None and ckpt.stage not in stages:
            raise CheckpointError(f"checkpoint stage {ckpt.stage!r} not in {tuple(stages)}")
        if expected_arch is not None:
            ckpt.check_arch(expected_arch)
        return ckpt

    def check_arch(self, expected: dict) -> None:
        for key, value in expected.items():
            if key in self.arch and _normalise(self.arch[key]) != _normalise(value):
                raise CheckpointError(
                    f"architecture mismatch for {key!r}: checkpoint has {self.arch[key]}, expected {value}"
                )


def _normalise(value):
    return json.loads(json.dumps(value, sort_keys=True))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
