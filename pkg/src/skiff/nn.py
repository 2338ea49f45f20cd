"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor, conv1d, conv2d, linear, reshape


class Module:
    """Plain attribute-walking parameter container."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    n = int(np.prod(shape))
    return rng.uniforms(n, -bound, bound).reshape(shape)


class Linear(Module):
    """y = W x + b on column-major features: x is (d_in, n)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None, bias: bool = True,
                 init: str = "uniform"):
        if init == "identity":
            if d_in != d_out:
                raise ValueError(f"identity init needs square weights, got {d_in}->{d_out}")
            w = np.eye(d_out)
        elif init == "zero":
            w = np.zeros((d_out, d_in))
        elif init == "uniform":
            w = _uniform_init(rng, (d_out, d_in), d_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((d_out, 1)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Square-kernel 2-D convolution over (C, H, W) maps."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng | None = None,
                 stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1,
                 bias: bool = True, init: str = "uniform", bias_fill: float = 0.0):
        shape = (c_out, c_in // groups, kernel, kernel)
        if init == "zero":
            w = np.zeros(shape)
        elif init == "center_identity":
            # centre-tap identity: constant maps pass through unchanged
            if c_in != c_out or groups != 1:
                raise ValueError("center_identity init needs c_in == c_out, groups == 1")
            w = np.zeros(shape)
            w[np.arange(c_out), np.arange(c_out), kernel // 2, kernel // 2] = 1.0
        elif init == "uniform":
            w = _uniform_init(rng, shape, (c_in // groups) * kernel * kernel)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full((c_out,), bias_fill, dtype=np.float64), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                      dilation=self.dilation, groups=self.groups)


class Conv1x1(Module):
    """Pointwise channel mix on (C, H, W) maps, computed as a matmul."""

    def __init__(self, c_in: int, c_out: int, rng: Rng | None = None, bias: bool = True,
                 init: str = "uniform"):
        self.inner = Linear(c_in, c_out, rng, bias=bias, init=init)
        self._c_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        flat = reshape(x, (c, h * w))
        return reshape(self.inner(flat), (self._c_out, h, w))


class Conv1d(Module):
    """Single-channel 1-D convolution (used for channel attention)."""

    def __init__(self, kernel: int, rng: Rng | None = None, padding: int = 0,
                 bias: bool = True, init: str = "uniform"):
        w = np.zeros((kernel,)) if init == "zero" else _uniform_init(rng, (kernel,), kernel)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(()), requires_grad=True) if bias else None
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, padding=self.padding)


class Scalar(Module):
    """A single learnable value."""

    def __init__(self, value: float):
        self.value = Tensor(np.asarray(float(value)), requires_grad=True)

    def __call__(self) -> Tensor:
        return self.value
