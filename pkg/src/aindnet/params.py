"""Named, tagged parameter collection.

Tags drive the transfer-learning partition.  A parameter's tag is derived
from its name alone (see :func:`tag_for`), so it is fixed by where the
parameter sits in the architecture.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor

TAGS = ("ain", "estimator", "last_conv", "backbone")


def tag_for(name: str) -> str:
    if name.startswith("est."):
        return "estimator"
    if ".ain" in name:
        return "ain"
    if name.startswith("rec.last."):
        return "last_conv"
    return "backbone"


@dataclass
class Param:
    tensor: Tensor
    tag: str


class ParamStore:
    def __init__(self):
        self._params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, value: np.ndarray, tag: str | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        tag = tag_for(name) if tag is None else tag
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        t = Tensor(np.ascontiguousarray(value), requires_grad=True, name=name)
        self._params[name] = Param(t, tag)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return ((k, p.tensor) for k, p in self._params.items())

    def tag(self, name: str) -> str:
        return self._params[name].tag

    def names_with_tag(self, tag: str) -> list[str]:
        return [k for k, p in self._params.items() if p.tag == tag]

    def tags(self) -> set[str]:
        return {p.tag for p in self._params.values()}

    def num_params(self, tag: str | None = None) -> int:
        return int(np.sum([p.tensor.data.size for p in self._params.values()
                           if tag is None or p.tag == tag]))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, p in self._params.items():
            out.add(k, p.tensor.data.copy(), p.tag)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, p in self._params.items():
            out.add(k, p.tensor.data.astype(dtype), p.tag)
        return out

    def digest(self, tags=None) -> str:
        """SHA-256 over names and raw bytes of parameters (optionally by tag)."""
        h = hashlib.sha256()
        for k, p in self._params.items():
            if tags is not None and p.tag not in tags:
                continue
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.tensor.data).tobytes())
        return h.hexdigest()
