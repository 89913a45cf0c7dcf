"""Parameter registry and the small layer helpers shared by every branch."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from pvnet import tensor as T
from pvnet.tensor import Tensor


class ParamStore:
    """Ordered registry of named parameter tensors, each tagged with a group and a trainable flag."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._groups: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, group: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, dtype=self.dtype, name=name)
        self._params[name] = t
        self._groups[name] = group
        return t

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

    def group(self, name: str) -> str:
        return self._groups[name]

    def groups(self) -> list[str]:
        return list(dict.fromkeys(self._groups.values()))

    def names_in(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    def set_trainable(self, group: str, flag: bool) -> None:
        for name in self.names_in(group):
            self._params[name].requires_grad = flag

    def trainable(self) -> list[Tensor]:
        return [t for t in self._params.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self, group: str | None = None) -> int:
        return int(sum(t.data.size for n, t in self._params.items() if group is None or self._groups[n] == group))

    def digest(self, group: str | None = None) -> str:
        """SHA-256 over names and raw bytes; restricted to one group if given."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            if group is None or self._groups[name] == group:
                h.update(name.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self._params.items())

    def load_state(self, state: dict) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            cur = self._params[name]
            if cur.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {tuple(arr.shape)} does not match {cur.shape}")
            cur.data = np.array(arr, dtype=self.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        """Copy with every parameter cast; used for 64-bit gradient checks."""
        out = ParamStore(dtype)
        for name, t in self._params.items():
            out.add(name, t.data, self._groups[name])
            out[name].requires_grad = t.requires_grad
        return out


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense:
    """Affine map ``x @ W + b`` on (rows, in) tensors."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 group: str, zero: bool = False):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else he_normal(rng, n_in, (n_in, n_out))
        self.weight = store.add(f"{name}.weight", w, group)
        self.bias = store.add(f"{name}.bias", np.zeros((1, n_out)), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


def mlp(layers: list[Dense], x: Tensor, final_relu: bool = True) -> Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if final_relu or i < len(layers) - 1:
            x = T.relu(x)
    return x
