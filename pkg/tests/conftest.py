"""Shared test helpers."""

import numpy as np

from ctpoint.autodiff import Tensor


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def jitter_params(module, rng):
    """Move biases and batchnorm affine parameters off their zero/one init.

    Finite-difference checks are unreliable when a ReLU input sits exactly at
    the kink, which zero-initialized biases make common (e.g. self-pair
    relative positions are exactly zero).  Generic parameter values avoid
    those special points.
    """
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            p.data = p.data + rng.uniform(0.05, 0.35, size=p.shape) * rng.choice(
                [-1.0, 1.0], size=p.shape
            )
        elif leaf == "gamma":
            p.data = rng.uniform(0.7, 1.3, size=p.shape).astype(p.data.dtype)


def snapshot_restore(module):
    """Return a thunk restoring the module's buffers (running stats) to now."""
    saved = {name: buf.copy() for name, buf in module.named_buffers()}

    def restore():
        for name, buf in module.named_buffers():
            buf[...] = saved[name]

    return restore
