"""Parameter containers and the small layer zoo used by the models.

Parameters are created with a declarative init spec and filled in by
`initialize`, which seeds each tensor from (global_seed, crc32(name)).
Same-named parameters therefore get identical values across model
variants built from the same seed, which the variant-equivalence tests
rely on.
"""
from __future__ import annotations

import zlib

import numpy as np

from .autograd import Tensor, add, layer_norm, matmul, take_rows


class Parameter(Tensor):
    """A trainable leaf tensor with an attached init spec."""

    __slots__ = ("init_spec",)

    def __init__(self, shape, init_spec, dtype=np.float32, frozen: bool = False):
        super().__init__(np.zeros(shape, dtype=dtype))
        self.requires_grad = not frozen
        self.frozen = frozen
        self.init_spec = init_spec


class Module:
    """Lightweight module tree; attribute assignment registers children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        self.items = list(items)
        for i, m in enumerate(items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def initialize(module: Module, seed: int, dtype=np.float32) -> None:
    """Fill every parameter from its init spec, seeded per parameter name."""
    for name, p in module.named_parameters():
        key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | zlib.crc32(name.encode())
        rng = np.random.Generator(np.random.Philox(key=key))
        kind = p.init_spec[0]
        if kind == "zeros":
            data = np.zeros(p.shape)
        elif kind == "ones":
            data = np.ones(p.shape)
        elif kind == "normal":
            data = rng.normal(0.0, p.init_spec[1], size=p.shape)
        elif kind == "skip_identity":
            # reduce concat(x, skip) to their average at start
            d = p.shape[1]
            data = 0.5 * np.concatenate([np.eye(d), np.eye(d)], axis=0)
        else:
            raise ValueError(f"unknown init spec {p.init_spec!r}")
        p.data = np.ascontiguousarray(data, dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, w_std: float = 0.02, zero_init: bool = False):
        super().__init__()
        spec = ("zeros",) if zero_init else ("normal", w_std)
        self.w = Parameter((d_in, d_out), spec)
        self.b = Parameter((d_out,), ("zeros",))

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.affine = affine
        if affine:
            self.gamma = Parameter((dim,), ("ones",))
            self.beta = Parameter((dim,), ("zeros",))

    def __call__(self, x):
        y = layer_norm(x, eps=self.eps)
        if self.affine:
            return y * self.gamma + self.beta
        return y


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, std: float = 0.3):
        super().__init__()
        self.weight = Parameter((n_rows, dim), ("normal", std))

    def __call__(self, ids):
        return take_rows(self.weight, np.asarray(ids))
