"""Tiny module system on top of :mod:`oponerf.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    """Container that discovers parameters and child modules by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def set_parameter(self, name: str, value: Tensor) -> None:
        """Rebind the parameter at dotted path ``name`` to ``value``."""
        if name in self._params:
            self._params[name] = value
            object.__setattr__(self, name, value)
            return
        for key, child in self._children.items():
            if name.startswith(key + "."):
                child.set_parameter(name[len(key) + 1 :], value)
                return
        raise KeyError(f"no parameter named {name!r}")


def gaussian(rng: np.random.Generator, shape, std: float, name: str | None = None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True, gain: float = 2.0):
        super().__init__()
        self.weight = gaussian(rng, (fan_in, fan_out), np.sqrt(gain / fan_in))
        if bias:
            self.bias = Tensor(np.zeros(fan_out), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, widths: list[int], last_gain: float = 2.0):
        super().__init__()
        n = len(widths) - 1
        self.layers = [
            Linear(rng, widths[i], widths[i + 1], gain=last_gain if i == n - 1 else 2.0) for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x
