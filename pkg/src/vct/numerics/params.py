"""Named parameter registry and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"VCT1" | version u16 | count u32 |
    count x ( name_len u16 | utf-8 name | rank u8 | rank x u32 extents | float32 payload )
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor

MAGIC = b"VCT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Parameter:
    name: str
    tensor: Tensor


class ParameterRegistry:
    """Ordered map name -> Tensor(requires_grad=True)."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        for name, t in self._params.items():
            yield Parameter(name, t)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise CheckpointError(f"parameter set mismatch; missing={missing} unexpected={extra}")
        for name, arr in state.items():
            t = self._params[name]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)

    def num_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))


def dumps(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a VCT1 checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            state[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return state


def save(path, registry_or_state) -> None:
    state = registry_or_state.state() if isinstance(registry_or_state, ParameterRegistry) else registry_or_state
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
