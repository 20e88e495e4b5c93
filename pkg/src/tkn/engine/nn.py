"""Small layer/module abstraction over the tensor engine.

A :class:`Module` owns parameter tensors as attributes (or lists of
sub-modules) and can enumerate them depth-first in attribute insertion
order, which gives checkpointing a stable, deterministic naming scheme.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    def named_params(self, prefix: str = ""):
        """Yield ``(name, tensor)`` for every parameter, depth-first."""
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield f"{prefix}{name}", val
            elif isinstance(val, Module):
                yield from val.named_params(f"{prefix}{name}/")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{name}{i}/")
                    elif isinstance(item, Tensor):
                        yield f"{prefix}{name}{i}", item

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return int(np.sum([t.size for t in self.params()], dtype=np.int64))

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.named_params():
            t.requires_grad = flag

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes in naming order."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ w (+ b), weight stored ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.w = Tensor(uniform_init(rng, (d_in, d_out), d_in), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        if self.b is None:
            del self.b  # keep named_params free of placeholders

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        b = getattr(self, "b", None)
        return y if b is None else ops.add(y, b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator, bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2
        self.w = Tensor(
            uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel),
            requires_grad=True,
        )
        if bias:
            self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, getattr(self, "b", None),
                          stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 output_padding: int, rng: np.random.Generator, bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2
        self.output_padding = output_padding
        self.w = Tensor(
            uniform_init(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel),
            requires_grad=True,
        )
        if bias:
            self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.w, getattr(self, "b", None),
                                    stride=self.stride, padding=self.padding,
                                    output_padding=self.output_padding)


class GroupNorm(Module):
    def __init__(self, channels: int, num_groups: int, eps: float = 1e-5):
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, self.num_groups, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
