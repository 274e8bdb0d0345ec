"""Learnable parameters, parameter containers and plain SGD."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Param(Tensor):
    """A leaf tensor that an optimizer updates.

    ``name`` is filled in by :meth:`Module.named_params` from the attribute
    path, which keeps names unique within a model.
    """

    __slots__ = ("name", "lr_mult")

    def __init__(self, data, name: str = "", lr_mult: float = 1.0, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.lr_mult = lr_mult

    def freeze(self) -> "Param":
        self.requires_grad = False
        self.grad = None
        return self


class Module:
    """Walks attributes (and lists/dicts of them) to find Params."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def params(self) -> list[Param]:
        out = []
        for name, p in self.named_params():
            p.name = name
            out.append(p)
        return out

    def trainable(self) -> list[Param]:
        return [p for p in self.params() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_params())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} != {own[name].shape}")
            own[name].data = np.array(value, dtype=np.float64)


def _walk(value, path: str) -> Iterator[tuple[str, Param]]:
    if isinstance(value, Param):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_params(prefix=path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{path}.{k}")


def sgd_step(params, lr: float) -> None:
    """``p <- p - lr * lr_mult * grad``, then clear the gradients."""
    for p in params:
        if p.grad is not None and p.requires_grad and lr != 0.0:
            p.data = p.data - (lr * p.lr_mult) * p.grad
        p.grad = None


# He-uniform gain for leaky ReLU with slope 0.1: keeps activation variance
# roughly constant through a deep stack without normalization layers
HE_GAIN = float(np.sqrt(6.0 / (1.0 + 0.1 ** 2)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """``U(-gain / sqrt(fan_in), gain / sqrt(fan_in))``."""
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
