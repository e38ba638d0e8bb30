"""Parameter containers and the small layer helpers used by the networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, default_dtype


@dataclass
class ModelWeights:
    """Named trainable parameters plus the configuration they were built for."""

    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, dtype=value.dtype, name=name)
        self.params[name] = t
        return t

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ModelWeights":
        out = ModelWeights(meta=dict(self.meta))
        for k, v in self.params.items():
            out.add(k, v.data.astype(dtype))
        return out

    def copy(self) -> "ModelWeights":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else default_dtype()

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))


class Initializer:
    """Seeded He-normal kernels and zero biases."""

    def __init__(self, weights: ModelWeights, seed: int, dtype=None):
        self.weights = weights
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype or default_dtype())

    def conv(self, name: str, c_in: int, c_out: int, k: int, bias: bool = True, gain: float = 2.0):
        std = np.sqrt(gain / (c_in * k * k))
        self.weights.add(f"{name}.weight", (self.rng.standard_normal((c_out, c_in, k, k)) * std).astype(self.dtype))
        if bias:
            self.weights.add(f"{name}.bias", np.zeros(c_out, dtype=self.dtype))

    def gru(self, name: str, hidden: int, inputs: int, k: int = 3):
        for gate in ("convz", "convr", "convq"):
            self.conv(f"{name}.{gate}", hidden + inputs, hidden, k, gain=1.0)


def conv(x: Tensor, w: ModelWeights, name: str, stride: int = 1, padding: int | None = None) -> Tensor:
    kernel = w[f"{name}.weight"]
    bias = w.params.get(f"{name}.bias")
    if padding is None:
        padding = kernel.shape[-1] // 2
    return ops.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv_gru_step(hidden: Tensor, inputs: Tensor, w: ModelWeights, name: str) -> Tensor:
    """Convolutional GRU update with 3x3 gates.

    z = sigmoid(conv([h, x])), r = sigmoid(conv([h, x])),
    q = tanh(conv([r * h, x])), h' = (1 - z) * h + z * q.
    """
    if hidden.shape[0] != inputs.shape[0] or hidden.shape[2:] != inputs.shape[2:]:
        raise ShapeError("conv_gru_step", hidden.shape, inputs.shape)
    wz, wr = w[f"{name}.convz.weight"], w[f"{name}.convr.weight"]
    if wz.shape[0] != hidden.shape[1] or wz.shape[1] != hidden.shape[1] + inputs.shape[1]:
        raise ShapeError("conv_gru_step (weights)", hidden.shape, inputs.shape, wz.shape)
    hx = ops.concat([hidden, inputs], axis=1)
    # z and r share their input, so evaluate them as one convolution
    kzr = ops.concat([wz, wr], axis=0)
    bzr = ops.concat([w[f"{name}.convz.bias"], w[f"{name}.convr.bias"]], axis=0)
    pad = wz.shape[-1] // 2
    zr = ops.sigmoid(ops.conv2d(hx, kzr, bzr, padding=pad))
    z, r = ops.split(zr, [hidden.shape[1], hidden.shape[1]], axis=1)
    rhx = ops.concat([r * hidden, inputs], axis=1)
    q = ops.tanh(conv(rhx, w, f"{name}.convq"))
    return hidden + z * (q - hidden)
