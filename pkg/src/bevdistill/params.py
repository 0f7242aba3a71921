"""Named parameter storage shared by the network modules."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` mapping with seeded, name-stable initialization.

    Each parameter draws from its own generator keyed by (seed, name), so
    adding a parameter never changes the initial values of the others.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        key = [ord(c) for c in name]
        return np.random.default_rng([self.seed, *key])

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def normal(self, name: str, shape: tuple[int, ...], std: float) -> Tensor:
        return self.add(name, self._rng(name).normal(scale=std, size=shape))

    def glorot(self, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
        return self.normal(name, (fan_in, fan_out), gain * np.sqrt(2.0 / (fan_in + fan_out)))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)
