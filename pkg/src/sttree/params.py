"""Named parameter storage with per-parameter seeded initialization."""

from __future__ import annotations

import zlib
from collections import OrderedDict

import numpy as np

from .tensor import Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    # each parameter gets its own stream, independent of creation order
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class ParamStore:
    """Ordered ``name -> Tensor`` mapping of every trainable tensor."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape, lo: float, hi: float) -> Tensor:
        return self.add(name, param_rng(self.seed, name).uniform(lo, hi, size=shape))

    def fan_in(self, name: str, shape, fan: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan)
        return self.uniform(name, shape, -bound, bound)

    def constant(self, name: str, shape, value: float) -> Tensor:
        return self.add(name, np.full(shape, float(value)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if k not in self._params:
                continue
            if self._params[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)
