from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Tensor, parameter


class Conv2d:
    """2-D convolution layer; Kaiming fan-in normal init, zero bias."""

    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, init_std=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        std = init_std if init_std is not None else np.sqrt(2.0 / (cin * k * k))
        self.w = parameter(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype))
        self.b = parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class Linear:
    def __init__(self, fin, fout, rng=None, init_std=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        std = init_std if init_std is not None else np.sqrt(2.0 / fin)
        self.w = parameter(rng.normal(0.0, std, size=(fin, fout)).astype(dtype))
        self.b = parameter(np.zeros(fout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def flatten_params(tree: dict, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a nested {name: Layer|dict|Tensor} tree into dotted names."""
    flat: dict[str, Tensor] = {}
    for name, node in tree.items():
        key = f"{prefix}{name}"
        if isinstance(node, Tensor):
            flat[key] = node
        elif isinstance(node, dict):
            flat.update(flatten_params(node, f"{key}."))
        else:
            flat.update(flatten_params(node.params(), f"{key}."))
    return flat
