"""Named parameter storage and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

MAGIC = b"RVWT"
VERSION = 1


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """name -> (value, grad, trainable). Values and grads always share a shape."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}
        self._live: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._params[name] = Param(arr, np.zeros_like(arr), trainable)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def param(self, name: str) -> Param:
        return self._params[name]

    def set_value(self, name: str, value) -> None:
        p = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != p.value.shape:
            raise ValueError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value = value.copy()

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].trainable = flag

    def num_values(self, trainable_only: bool = False) -> int:
        return int(sum(p.value.size for p in self._params.values()
                       if p.trainable or not trainable_only))

    # -- graph binding -------------------------------------------------
    def t(self, name: str) -> Tensor:
        """Leaf tensor for ``name`` in the current forward pass."""
        live = self._live.get(name)
        if live is None:
            p = self._params[name]
            live = Tensor(p.value, requires_grad=p.trainable, name=name)
            self._live[name] = live
        return live

    def begin(self) -> None:
        """Start a fresh forward pass: drop leaves bound to the previous one."""
        self._live = {}

    def collect_grads(self) -> None:
        """Accumulate gradients from the bound leaves into the grad slots."""
        for name, leaf in self._live.items():
            p = self._params[name]
            if leaf.grad is not None and p.trainable:
                p.grad += leaf.grad.astype(self.dtype, copy=False)
        self._live = {}

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(dtype)
        for name, p in self._params.items():
            other.add(name, p.value, p.trainable)
        return other

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].value, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- checkpoint ----------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(self._params)))
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", p.value.ndim))
            buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, dtype=np.float32) -> "ParamStore":
        if data[:4] != MAGIC:
            raise ValueError("not a weights checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 12
        store = cls(dtype)
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            store.add(name, arr)
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes(), dtype)
