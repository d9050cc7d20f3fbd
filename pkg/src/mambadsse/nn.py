"""Minimal parameter containers on top of the tape."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Registers Tensor parameters and child modules assigned as attributes."""

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_params", {})[key] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self.__dict__.setdefault("_children", {})[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, p in self.__dict__.get("_params", {}).items():
            out[prefix + k] = p
        for k, child in self.__dict__.get("_children", {}).items():
            out.update(child.named_parameters(f"{prefix}{k}."))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if k in arrays:
                if arrays[k].shape != p.shape:
                    raise ag.ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
                p.data[...] = arrays[k]


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, scale: float | None = None):
        std = (1.0 / np.sqrt(d_in)) if scale is None else scale
        self.weight = param(rng.normal(0.0, std, size=(d_in, d_out)) if std else np.zeros((d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ag.ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Feed-forward net with tanh hidden activations and a linear output layer."""

    def __init__(self, d_in: int, hidden: list[int], d_out: int, rng: np.random.Generator):
        dims = [d_in, *hidden, d_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ag.tanh(layer(x))
        return self.layers[-1](x)
