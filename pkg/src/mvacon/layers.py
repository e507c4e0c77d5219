"""Small parameterized building blocks over :mod:`mvacon.tensor`."""

from __future__ import annotations

from . import tensor as T
from .tensor import ParamStore, Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int,
                 bias: bool = True, init: str = "uniform-fan-in"):
        self.weight = store.create(f"{name}.weight", (din, dout), init, fan_in=din)
        self.bias = store.create(f"{name}.bias", (dout,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class MLP:
    """Two affine maps with a ReLU between them."""

    def __init__(self, store: ParamStore, name: str, din: int, hidden: int, dout: int,
                 out_bias: bool = True):
        self.fc1 = Linear(store, f"{name}.fc1", din, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dout, bias=out_bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def zero_(self) -> None:
        self.fc1.zero_()
        self.fc2.zero_()


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, c: int, eps: float = 1e-5):
        self.gamma = store.create(f"{name}.gamma", (c,), "ones")
        self.beta = store.create(f"{name}.beta", (c,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 stride: int = 1, pad: int = 0, bias: bool = True):
        self.weight = store.create(f"{name}.weight", (k, k, cin, cout), fan_in=k * k * cin)
        self.bias = store.create(f"{name}.bias", (cout,), "zeros") if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class FeedForward:
    """Pre-norm residual feed-forward branch: ``x + MLP(LN(x))``."""

    def __init__(self, store: ParamStore, name: str, c: int, hidden: int | None = None):
        self.norm = LayerNorm(store, f"{name}.norm", c)
        self.mlp = MLP(store, f"{name}.mlp", c, hidden or 2 * c, c)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.mlp(self.norm(x))

    def zero_(self) -> None:
        self.mlp.zero_()
