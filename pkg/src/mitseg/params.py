"""Ordered name -> Tensor parameter store plus weight initializers."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class ParamStore:
    """All learnable parameters of one model, keyed by dotted names.

    Iteration order is definition order, which checkpoint serialization
    relies on. Names are unique.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(data, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def total_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def load_array(self, name: str, data: np.ndarray):
        t = self[name]
        if tuple(data.shape) != t.shape:
            raise ShapeError(f"parameter {name!r}: stored shape {data.shape} != {t.shape}")
        t.data = np.ascontiguousarray(data, dtype=np.float32)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled into [-2*std, 2*std]."""
    out = rng.standard_normal(shape) * std
    for _ in range(8):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum())) * std
    return np.clip(out, -2.0 * std, 2.0 * std).astype(np.float32)


def conv_fan_out_normal(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    """Kaiming-style init for conv kernels [Cout, Cin/g, Kh, Kw]."""
    cout, _, kh, kw = shape
    fan_out = kh * kw * cout // groups
    std = (2.0 / fan_out) ** 0.5
    return (rng.standard_normal(shape) * std).astype(np.float32)
