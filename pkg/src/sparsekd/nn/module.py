from __future__ import annotations

from typing import Iterator

import numpy as np


class Parameter:
    """A trainable array with its gradient accumulator."""

    def __init__(self, values: np.ndarray, name: str = "", frozen: bool = False):
        self.values = np.asarray(values)
        self.grad = np.zeros_like(self.values)
        self.name = name
        self.frozen = frozen

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if g.shape != self.values.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {self.values.shape} ({self.name})")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Base for layers and networks.

    Parameters, submodules and lists of submodules are discovered from
    instance attributes in assignment order, which fixes parameter naming.
    Non-trainable state arrays are listed in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod[int(part)] if isinstance(mod, list) else getattr(mod, part)
        getattr(mod, leaf)[...] = value

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.values = p.values.astype(dtype)
            p.grad = np.zeros_like(p.values)
        for m in self.modules():
            for key in m._buffers:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.values for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def check_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Raise on the first missing or mis-shaped tensor, without modifying anything."""
        expected = {name: p.values for name, p in self.named_parameters()}
        expected.update(self.named_buffers())
        for name, target in expected.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in state")
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise ValueError(f"shape mismatch for {name!r}: checkpoint {src.shape} vs network {target.shape}")

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.check_state_dict(state)
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, p in params.items():
            p.values = np.array(state[name], dtype=p.values.dtype)
            p.grad = np.zeros_like(p.values)
        for name in buffers:
            self.set_buffer(name, state[name])
