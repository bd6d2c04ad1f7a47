"""Parameterized building blocks on top of the autodiff engine.

Layers own their weight tensors and expose them through `named_parameters`
(stable path names, used for checkpointing and optimizer state).  Batchnorm
additionally owns running statistics exposed via `named_buffers`.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, batchnorm, linear, relu


def he_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)


class Linear:
    """Affine map on the last axis; `init` selects the weight distribution."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True,
                 init: str = "he", dtype=DEFAULT_DTYPE):
        if init == "he":
            w = he_uniform(rng, d_in, d_out, dtype)
        elif init == "xavier":
            w = xavier_uniform(rng, d_in, d_out, dtype)
        elif init == "small":
            w = rng.uniform(-0.01, 0.01, size=(d_in, d_out)).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, dtype=dtype) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    def named_buffers(self, prefix: str = ""):
        return iter(())


class BatchNorm:
    """Per-channel batch normalization over all leading axes (channels last)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            train=train, momentum=self.momentum, eps=self.eps,
        )

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta

    def named_buffers(self, prefix: str = ""):
        # arrays are mutated in place by batchnorm, never rebound, so these
        # references stay valid for checkpoint save/load
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var


class LBR:
    """linear + batchnorm + ReLU composite."""

    def __init__(self, rng, d_in: int, d_out: int, dtype=DEFAULT_DTYPE):
        self.lin = Linear(rng, d_in, d_out, init="he", dtype=dtype)
        self.bn = BatchNorm(d_out, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return relu(self.bn(self.lin(x), train))

    def named_parameters(self, prefix: str = ""):
        yield from self.lin.named_parameters(f"{prefix}lin.")
        yield from self.bn.named_parameters(f"{prefix}bn.")

    def named_buffers(self, prefix: str = ""):
        yield from self.bn.named_buffers(f"{prefix}bn.")


def collect_parameters(module, prefix: str = "") -> dict[str, Tensor]:
    return dict(module.named_parameters(prefix))


def collect_buffers(module, prefix: str = "") -> dict[str, np.ndarray]:
    return dict(module.named_buffers(prefix))
