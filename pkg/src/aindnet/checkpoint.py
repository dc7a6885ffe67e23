"""Single-file checkpoint format.

Layout (all integers little-endian)::

    b"AINDCKPT" | u32 version | u64 header length | header (UTF-8 JSON)
    | raw tensor payload | 32-byte SHA-256 of everything before it

The header holds the model config, a parameter table (name, tag, shape,
dtype, offset, nbytes) and an optional optimizer table with the same
columns plus a slot name.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .params import ParamStore

MAGIC = b"AINDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    store: ParamStore
    optimizer: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        payload = bytearray()
        table = []
        for name, t in self.store.items():
            arr = _le(t.data)
            table.append({"name": name, "tag": self.store.tag(name), "shape": list(arr.shape),
                          "dtype": arr.dtype.str, "offset": len(payload), "nbytes": arr.nbytes})
            payload += arr.tobytes()
        opt = None
        if self.optimizer is not None:
            entries = []
            for slot in ("m", "v"):
                for name, a in self.optimizer[slot].items():
                    arr = _le(a)
                    entries.append({"name": name, "slot": slot, "shape": list(arr.shape),
                                    "dtype": arr.dtype.str, "offset": len(payload),
                                    "nbytes": arr.nbytes})
                    payload += arr.tobytes()
            opt = {"hyper": self.optimizer["hyper"], "steps": self.optimizer["steps"],
                   "entries": entries}
        header = json.dumps({"model_config": self.model_config.to_dict(), "params": table,
                             "optimizer": opt, "meta": self.meta}, sort_keys=True).encode()
        body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + bytes(payload)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes, expected_config: ModelConfig | None = None) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 12 + 32 or blob[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch")
        version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + 12
        header = json.loads(body[start:start + hlen].decode())
        payload = memoryview(body)[start + hlen:]
        cfg = ModelConfig(**header["model_config"])
        if expected_config is not None and cfg != expected_config:
            raise CheckpointError(
                f"architecture mismatch: checkpoint has {cfg}, expected {expected_config}")

        def read(entry):
            arr = np.frombuffer(payload[entry["offset"]:entry["offset"] + entry["nbytes"]],
                                dtype=np.dtype(entry["dtype"]))
            return arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))

        store = ParamStore()
        for entry in header["params"]:
            store.add(entry["name"], read(entry), entry["tag"])
        opt = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            opt = {"hyper": o["hyper"], "steps": o["steps"], "m": {}, "v": {}}
            for entry in o["entries"]:
                opt[entry["slot"]][entry["name"]] = read(entry)
        return cls(cfg, store, opt, header.get("meta", {}))

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path, expected_config: ModelConfig | None = None) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), expected_config)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def config_hash(self) -> str:
        return config_hash(self.model_config)
